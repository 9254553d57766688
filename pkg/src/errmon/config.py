"""Configuration file loading.

One INI file describes the deployment: network roles under [network], timing
under [timers], component sizing under [switch]/[fsd]/[control]/[replay], and
an optional [workload] section for the synthetic generator. Validation errors
carry file and line positions.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields
from typing import Optional

from .core import NetworkConfig, Timers, ip_to_int
from .ingest import DelaySpec, PipelineOptions, WorkloadSpec

ANON_KEY_ENV = "ERRMON_ANON_KEY"


class ConfigError(ValueError):
    def __init__(self, path: str, line: Optional[int], message: str):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line else path
        super().__init__(f"{where}: {message}")


def _find_line(text: str, section: str, key: str) -> Optional[int]:
    in_section = False
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            in_section = stripped[1:-1].strip() == section
        elif in_section and stripped.split("=")[0].split(":")[0].strip() == key and (
            "=" in stripped or ":" in stripped
        ):
            return lineno
    return None


@dataclass
class AppConfig:
    network: NetworkConfig
    options: PipelineOptions
    workload: Optional[WorkloadSpec]
    whitelist_file: Optional[str]
    path: str


def _split_list(value: str) -> list[str]:
    return [item for chunk in value.split(",") for item in (chunk.strip(),) if item]


def _parse_endpoint(text: str) -> tuple[int, int, int]:
    # form: ip:port/proto, e.g. 10.0.0.9:8022/6
    addr, _, proto_text = text.partition("/")
    ip_text, _, port_text = addr.rpartition(":")
    return ip_to_int(ip_text), int(port_text), int(proto_text or 6)


def load_config(path: str, anon_key_override: Optional[int] = None) -> AppConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(path, None, f"cannot read config: {exc}") from exc
    parser.read_string(text)

    def fail(section: str, key: str, message: str) -> ConfigError:
        return ConfigError(path, _find_line(text, section, key), f"[{section}] {key}: {message}")

    if not parser.has_section("network"):
        raise ConfigError(path, None, "missing required [network] section")
    net = parser["network"]
    internal = _split_list(net.get("internal_prefixes", ""))
    if not internal:
        raise fail("network", "internal_prefixes", "at least one CIDR prefix required")
    telescope = _split_list(net.get("telescope_prefixes", ""))
    impersonation = set()
    for item in _split_list(net.get("impersonation", "")):
        try:
            impersonation.add(_parse_endpoint(item))
        except ValueError as exc:
            raise fail("network", "impersonation", f"bad endpoint {item!r}: {exc}") from exc
    key_text = os.environ.get(ANON_KEY_ENV) or net.get("anonymization_key", "0")
    if anon_key_override is not None:
        anon_key = anon_key_override
    else:
        try:
            anon_key = int(key_text, 16)
        except ValueError as exc:
            raise fail("network", "anonymization_key", f"not a hex key: {key_text!r}") from exc

    timers = Timers()
    if parser.has_section("timers"):
        sec = parser["timers"]
        int_timers = {"d_max", "k_batch"}
        for f in fields(Timers):
            if f.name in sec:
                raw_value = sec[f.name]
                try:
                    value = int(raw_value) if f.name in int_timers else float(raw_value)
                except ValueError as exc:
                    raise fail("timers", f.name, f"bad number {raw_value!r}") from exc
                setattr(timers, f.name, value)
    try:
        timers.validate()
    except ValueError as exc:
        name = str(exc).split()[1] if "timer" in str(exc) else "dt"
        raise fail("timers", name, str(exc)) from exc

    try:
        network = NetworkConfig(
            internal_prefixes=internal,
            telescope_prefixes=telescope,
            impersonation_set=impersonation,
            anonymization_key=anon_key,
            timers=timers,
        )
    except ValueError as exc:
        raise ConfigError(path, _find_line(text, "network", "internal_prefixes"), str(exc)) from exc

    options = PipelineOptions()
    section_map = {
        "switch": {
            "capacity": ("switch_capacity", int),
            "mirror_capacity": ("mirror_capacity", int),
            "notify_capacity": ("notify_capacity", int),
        },
        "fsd": {
            "hash_buckets": ("hash_buckets", int),
            "ring_capacity": ("ring_capacity", int),
            "hash_seed": ("hash_seed", int),
            "store_duplicates": ("store_duplicates", None),
        },
        "control": {
            "queue_capacity": ("control_queue_capacity", int),
            "latency_a": ("latency_a", float),
            "latency_b": ("latency_b", float),
            "latency_c": ("latency_c", float),
        },
        "replay": {
            "clean_interval": ("clean_interval", float),
            "metrics_interval": ("metrics_interval", float),
            "control_period": ("control_period", float),
            "responder_enabled": ("responder_enabled", None),
            "responder_seed": ("responder_seed", int),
        },
    }
    whitelist_file = None
    for section, keys in section_map.items():
        if not parser.has_section(section):
            continue
        for key, raw_value in parser[section].items():
            if section == "switch" and key == "whitelist_file":
                whitelist_file = raw_value
                if not os.path.isabs(whitelist_file):
                    whitelist_file = os.path.join(os.path.dirname(os.path.abspath(path)), whitelist_file)
                continue
            if key not in keys:
                raise fail(section, key, "unknown key")
            attr, conv = keys[key]
            try:
                if conv is None:
                    value = parser[section].getboolean(key)
                else:
                    value = conv(raw_value)
            except ValueError as exc:
                raise fail(section, key, f"bad value {raw_value!r}") from exc
            setattr(options, attr, value)

    workload = None
    if parser.has_section("workload"):
        workload = WorkloadSpec()
        delay_fields = {"duplicate_delay", "delay_incoming", "delay_outgoing"}
        int_fields = {"n_flows", "follow_up_packets", "internal_hosts", "external_hosts",
                      "payload_min", "payload_max"}
        bool_fields = {"impersonated_dialogue"}
        for key, raw_value in parser["workload"].items():
            if key == "whitelist_services":
                services = []
                for item in _split_list(raw_value):
                    ip_text, _, port_text = item.rpartition(":")
                    services.append((ip_to_int(ip_text), int(port_text)))
                workload.whitelist_services = services
                continue
            if not hasattr(workload, key):
                raise fail("workload", key, "unknown key")
            try:
                if key in delay_fields:
                    value = DelaySpec.parse(raw_value)
                elif key in int_fields:
                    value = int(raw_value)
                elif key in bool_fields:
                    value = parser["workload"].getboolean(key)
                else:
                    value = float(raw_value)
            except ValueError as exc:
                raise fail("workload", key, f"bad value {raw_value!r}") from exc
            setattr(workload, key, value)
        try:
            workload.validate()
        except ValueError as exc:
            raise ConfigError(path, _find_line(text, "workload", "n_flows"), str(exc)) from exc

    return AppConfig(network=network, options=options, workload=workload,
                     whitelist_file=whitelist_file, path=path)
