import os
import logging
from dataclasses import dataclass, field, replace
from dotenv import load_dotenv, dotenv_values

load_dotenv()
logger = logging.getLogger(__name__)

# Runtime configuration
LOG_LEVEL = os.environ.get('MANET_IDS_LOG_LEVEL', 'INFO')
LOG_FILE = os.environ.get('MANET_IDS_LOG_FILE')
OUT_DIR = os.environ.get('MANET_IDS_OUT_DIR', 'out')

# Key algebra and wire constants
KEY_BITS = 128
KEY_WIDTHS = (128, 192, 256)
NONCE_BITS = 64
NODE_ID_BYTES = 4
BROADCAST = 0xFFFFFFFF
DEFAULT_TIMEOUT = 5.0
CIPHERS = ('aes-gcm', 'aes-ccm')
HASHES = ('sha256', 'sha3-256', 'blake2s')

# Detection and response constants
GLOBAL_TRIGGER = 2 / 3
DEFAULT_WINDOW = 30
STD_FLOOR = 1e-9
ATTACK_DOMINANT = 0.5

FEATURE_COLUMNS = [
    'nav',
    'tx_rate',
    'rx_rate',
    'rts_retx_rate',
    'data_retx_rate',
    'active_neighbors',
    'forwarding_nodes',
]
LABEL_COLUMN = 'label'
LABELS = {
    'normal': 0,
    'attack': 1,
}

SECURITY_GOALS = {
    'key_secrecy': 'Key secrecy (eavesdropper transcript scan)',
    'replay': 'Replay resistance (re-injected messages)',
    'forward_secrecy': 'Forward secrecy (leaver oracle)',
    'backward_secrecy': 'Backward secrecy (joiner oracle)',
}

EXIT_CODES = {
    'OK': 0,
    'INPUT_ERROR': 1,
    'SUITE_FAILURE': 2,
}


class ConfigError(Exception):
    """Scenario configuration could not be parsed or validated."""


@dataclass(frozen=True)
class MobilityConfig:
    speed_min: float = 0.0
    speed_max: float = 10.0
    pause_time: float = 0.0


@dataclass(frozen=True)
class TrafficConfig:
    generators: int = 20
    destinations: int = 10
    mean_payload: int = 512
    attack_start: float = 50.0
    attack_end: float = 200.0
    sample_interval: float = 1.0
    effect_size: float = 4.0


@dataclass(frozen=True)
class SomConfig:
    rows: int = 50
    cols: int = 80
    epochs: int = 20
    lr_start: float = 0.5
    lr_end: float = 0.05
    radius_start: float | None = None  # max(rows, cols) / 2 when unset
    radius_end: float = 1.0
    hill_quantile: float = 0.85

    @property
    def initial_radius(self):
        return self.radius_start if self.radius_start is not None else max(self.rows, self.cols) / 2


@dataclass(frozen=True)
class ProtocolConfig:
    key_bits: int = KEY_BITS
    cipher: str = 'aes-gcm'
    hash_name: str = 'sha256'
    timeout: float = DEFAULT_TIMEOUT
    latency: float = 0.0
    replay_check: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    node_count: int = 50
    area_width: float = 1800.0
    area_height: float = 1000.0
    radio_range: float = 250.0
    duration: float = 200.0
    root: int = 0
    master_key: str | None = None
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    som: SomConfig = field(default_factory=SomConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    pause_times: tuple = (0.0,)
    dropper_counts: tuple = (0,)
    droppers: tuple = ()
    eavesdroppers: tuple = ()
    replayers: tuple = ()
    joins: tuple = ()
    leaves: tuple = ()
    global_rekey_period: float = 0.0
    local_rekey_period: float = 0.0
    response_interval: float = 10.0
    window: int = DEFAULT_WINDOW
    min_window: int = DEFAULT_WINDOW
    train_fraction: float = 0.5
    quarantine_lift_on_reauth: bool = True
    count_unclassified: bool = False
    attack_trials: int = 1000
    replay_trials: int = 100

    def cells(self):
        """Yield one config per (pause time, dropper count) sweep cell."""
        for pause in self.pause_times:
            for count in self.dropper_counts:
                yield replace(
                    self,
                    mobility=replace(self.mobility, pause_time=float(pause)),
                    pause_times=(float(pause),),
                    dropper_counts=(int(count),),
                )


def _floats(text):
    return tuple(float(part) for part in text.split(',') if part.strip())


def _ints(text):
    return tuple(int(part) for part in text.split(',') if part.strip())


def _schedule(text):
    events = []
    for part in text.split(','):
        part = part.strip()
        if not part:
            continue
        when, node = part.split(':')
        events.append((float(when), int(node)))
    return tuple(sorted(events))


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if text.strip().lower() in ('', 'none', 'auto') else float(text)


# KEY -> (section, field, parser); section None means ScenarioConfig itself
SCENARIO_KEYS = {
    'NODE_COUNT': (None, 'node_count', int),
    'AREA_WIDTH': (None, 'area_width', float),
    'AREA_HEIGHT': (None, 'area_height', float),
    'RANGE': (None, 'radio_range', float),
    'DURATION': (None, 'duration', float),
    'ROOT': (None, 'root', int),
    'MASTER_KEY': (None, 'master_key', str),
    'PAUSE_TIMES': (None, 'pause_times', _floats),
    'DROPPER_COUNTS': (None, 'dropper_counts', _ints),
    'DROPPERS': (None, 'droppers', _ints),
    'EAVESDROPPERS': (None, 'eavesdroppers', _ints),
    'REPLAYERS': (None, 'replayers', _ints),
    'JOINS': (None, 'joins', _schedule),
    'LEAVES': (None, 'leaves', _schedule),
    'GLOBAL_REKEY_PERIOD': (None, 'global_rekey_period', float),
    'LOCAL_REKEY_PERIOD': (None, 'local_rekey_period', float),
    'RESPONSE_INTERVAL': (None, 'response_interval', float),
    'WINDOW': (None, 'window', int),
    'MIN_WINDOW': (None, 'min_window', int),
    'TRAIN_FRACTION': (None, 'train_fraction', float),
    'QUARANTINE_LIFT_ON_REAUTH': (None, 'quarantine_lift_on_reauth', _bool),
    'COUNT_UNCLASSIFIED': (None, 'count_unclassified', _bool),
    'ATTACK_TRIALS': (None, 'attack_trials', int),
    'REPLAY_TRIALS': (None, 'replay_trials', int),
    'SPEED_MIN': ('mobility', 'speed_min', float),
    'SPEED_MAX': ('mobility', 'speed_max', float),
    'GENERATORS': ('traffic', 'generators', int),
    'DESTINATIONS': ('traffic', 'destinations', int),
    'MEAN_PAYLOAD': ('traffic', 'mean_payload', int),
    'ATTACK_START': ('traffic', 'attack_start', float),
    'ATTACK_END': ('traffic', 'attack_end', float),
    'SAMPLE_INTERVAL': ('traffic', 'sample_interval', float),
    'EFFECT_SIZE': ('traffic', 'effect_size', float),
    'SOM_ROWS': ('som', 'rows', int),
    'SOM_COLS': ('som', 'cols', int),
    'SOM_EPOCHS': ('som', 'epochs', int),
    'LR_START': ('som', 'lr_start', float),
    'LR_END': ('som', 'lr_end', float),
    'RADIUS_START': ('som', 'radius_start', _optional_float),
    'RADIUS_END': ('som', 'radius_end', float),
    'HILL_QUANTILE': ('som', 'hill_quantile', float),
    'KEY_BITS': ('protocol', 'key_bits', int),
    'CIPHER': ('protocol', 'cipher', str),
    'HASH': ('protocol', 'hash_name', str),
    'TIMEOUT': ('protocol', 'timeout', float),
    'LATENCY': ('protocol', 'latency', float),
}

# field name -> KEY, for anchoring validation messages
_FIELD_KEYS = {(section, name): key for key, (section, name, _) in SCENARIO_KEYS.items()}


def _key_lines(path):
    lines = {}
    with open(path, encoding='utf-8') as handle:
        for number, raw in enumerate(handle, start=1):
            text = raw.strip()
            if not text or text.startswith('#'):
                continue
            if text.startswith('export '):
                text = text[len('export '):]
            key = text.split('=', 1)[0].strip()
            lines.setdefault(key, number)
    return lines


def validate_config(cfg):
    """Return a list of (section, field, message) problems; empty when valid."""
    problems = []

    def check(ok, section, name, message):
        if not ok:
            problems.append((section, name, message))

    check(cfg.node_count >= 2, None, 'node_count', "at least two nodes are required")
    check(cfg.area_width > 0 and cfg.area_height > 0, None, 'area_width', "area must be positive")
    check(cfg.radio_range > 0, None, 'radio_range', "range must be positive")
    check(cfg.duration > 0, None, 'duration', "duration must be positive")
    check(0 <= cfg.root < cfg.node_count, None, 'root', f"root {cfg.root} is not a node id")
    for name in ('droppers', 'eavesdroppers', 'replayers'):
        bad = [n for n in getattr(cfg, name) if not 0 <= n < cfg.node_count]
        check(not bad, None, name, f"unknown node ids {bad}")
    for name in ('joins', 'leaves'):
        for when, node in getattr(cfg, name):
            check(0 <= node < cfg.node_count, None, name, f"unknown node id {node}")
            check(0 <= when <= cfg.duration, None, name, f"event time {when} outside run duration")
    check(all(c >= 0 for c in cfg.dropper_counts), None, 'dropper_counts', "counts must be non-negative")
    check(all(c < cfg.node_count for c in cfg.dropper_counts), None, 'dropper_counts',
          "more droppers than nodes")
    check(all(p >= 0 for p in cfg.pause_times), None, 'pause_times', "pause times must be non-negative")
    check(cfg.window >= 1, None, 'window', "window must be positive")
    check(cfg.min_window >= 1, None, 'min_window', "minimum window must be positive")
    check(0 < cfg.train_fraction < 1, None, 'train_fraction', "train fraction must lie in (0, 1)")
    check(cfg.response_interval > 0, None, 'response_interval', "response interval must be positive")
    check(cfg.global_rekey_period >= 0, None, 'global_rekey_period', "period must be non-negative")
    check(cfg.local_rekey_period >= 0, None, 'local_rekey_period', "period must be non-negative")

    mob = cfg.mobility
    check(0 <= mob.speed_min <= mob.speed_max, 'mobility', 'speed_min', "need 0 <= speed_min <= speed_max")

    traffic = cfg.traffic
    check(traffic.generators >= 0, 'traffic', 'generators', "generator count must be non-negative")
    check(traffic.destinations >= 1, 'traffic', 'destinations', "at least one destination")
    check(0 <= traffic.attack_start <= traffic.attack_end <= cfg.duration, 'traffic', 'attack_start',
          "attack window must lie within the run duration")
    check(traffic.sample_interval > 0, 'traffic', 'sample_interval', "sample interval must be positive")

    som = cfg.som
    check(som.rows >= 2 and som.cols >= 2, 'som', 'rows', "map must be at least 2x2")
    check(som.epochs >= 1, 'som', 'epochs', "at least one epoch")
    check(0 < som.hill_quantile < 1, 'som', 'hill_quantile', "quantile must lie in (0, 1)")
    check(som.lr_start > 0 and som.lr_end > 0, 'som', 'lr_start', "learning rates must be positive")

    proto = cfg.protocol
    check(proto.key_bits in KEY_WIDTHS, 'protocol', 'key_bits', f"key width must be one of {KEY_WIDTHS}")
    check(proto.cipher in CIPHERS, 'protocol', 'cipher', f"cipher must be one of {CIPHERS}")
    check(proto.hash_name in HASHES, 'protocol', 'hash_name', f"hash must be one of {HASHES}")
    check(proto.timeout > 0, 'protocol', 'timeout', "timeout must be positive")
    check(proto.latency >= 0, 'protocol', 'latency', "latency must be non-negative")

    if cfg.master_key is not None:
        try:
            ok = len(bytes.fromhex(cfg.master_key)) * 8 == proto.key_bits
        except ValueError:
            ok = False
        check(ok, None, 'master_key', f"master key must be {proto.key_bits // 4} hex digits")
    return problems


def load_scenario_config(path):
    """Parse a KEY=VALUE scenario file into a validated ScenarioConfig."""
    if not os.path.isfile(path):
        raise ConfigError(f"{path}: config file not found")

    values = dotenv_values(path)
    lines = _key_lines(path)
    sections = {None: {}, 'mobility': {}, 'traffic': {}, 'som': {}, 'protocol': {}}

    for key, raw in values.items():
        where = f"{path}:{lines.get(key, '?')}"
        if key not in SCENARIO_KEYS:
            raise ConfigError(f"{where}: unknown key {key}")
        if raw is None:
            raise ConfigError(f"{where}: {key} has no value")
        section, name, parse = SCENARIO_KEYS[key]
        try:
            sections[section][name] = parse(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key}: {e}") from e

    top = sections[None]
    cfg = ScenarioConfig(
        mobility=MobilityConfig(**sections['mobility']),
        traffic=TrafficConfig(**sections['traffic']),
        som=SomConfig(**sections['som']),
        protocol=ProtocolConfig(**sections['protocol']),
        **top,
    )

    problems = validate_config(cfg)
    if problems:
        section, name, message = problems[0]
        key = _FIELD_KEYS.get((section, name), name.upper())
        raise ConfigError(f"{path}:{lines.get(key, '?')}: {key}: {message}")

    logger.info(f"Loaded scenario config from {path} ({len(values)} keys)")
    return cfg


def config_fields(cfg):
    """Flat (KEY, value) view of a config, used for metrics headers."""
    out = {}
    for key, (section, name, _) in SCENARIO_KEYS.items():
        holder = cfg if section is None else getattr(cfg, section)
        out[key] = getattr(holder, name)
    return out

