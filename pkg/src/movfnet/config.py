"""Plain-text run configuration: ``[section]`` headers and ``key = value`` lines.

``#`` and ``;`` start comments. Every key is typed by ``SCHEMA``; unknown
sections or keys and unparseable values raise ``ConfigError`` with the line
number. Resolved configs include every default, so a snapshot fully
describes a run.
"""

from .errors import ConfigError


def _bool(s):
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _int_list(s):
    vals = [int(p) for p in s.replace(",", " ").split()]
    if not vals:
        raise ValueError("expected at least one integer")
    return tuple(vals)


def _opt_int(s):
    return None if s.lower() in ("none", "") else int(s)


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


SCHEMA = {
    "data": {
        "path": (str, None),
        "train_split": (str, "train"),
        "val_split": (str, "val"),
        "resize": (int, 0),
    },
    "network": {
        "preset": (_choice("medmnist", "custom"), "medmnist"),
        "widths": (_int_list, (16, 16, 32, 32, 64)),
        "stride_block": (_opt_int, 1),
        "sigma": (float, 1.0),
        "frame_sigma": (float, 2.0),
        "tau": (float, 1e-2),
        "leaky_slope": (float, 0.01),
        "padding": (_choice("reflect", "zero"), "reflect"),
        "num_classes": (int, 0),
    },
    "train": {
        "batch_size": (int, 32),
        "epochs": (int, 10),
        "learning_rate": (float, 1e-3),
        "optimizer": (_choice("adam", "sgd"), "adam"),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "sgd_momentum": (float, 0.0),
        "augment": (_choice("none", "octahedral", "arbitrary"), "none"),
        "seed": (int, 0),
        "eval_batch_size": (int, 32),
    },
    "run": {
        "out_dir": (str, "runs/train"),
        "precision": (_choice("32", "64"), "32"),
        "workers": (int, 1),
        "deterministic": (_bool, True),
    },
}


class _Raw(dict):
    def __init__(self):
        super().__init__()
        self.section_lines = {}


def parse_text(text, path=None):
    """Raw parse: ``{section: {key: (value_string, lineno)}}``.

    Header line numbers are kept in ``section_lines`` on the returned dict.
    """
    out = _Raw()
    headers = out.section_lines
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]") or len(s) < 3:
                raise ConfigError(f"malformed section header {s!r}", lineno, path)
            section = s[1:-1].strip()
            if section in out:
                raise ConfigError(f"duplicate section [{section}]", lineno, path)
            out[section] = {}
            headers[section] = lineno
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", lineno, path)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno, path)
        key, val = (p.strip() for p in s.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno, path)
        if key in out[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno, path)
        out[section][key] = (val, lineno)
    return out


def resolve(raw, path=None):
    """Typed config with defaults filled in; raises ``ConfigError`` with line numbers."""
    cfg = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec, items in raw.items():
        if sec not in SCHEMA:
            line = getattr(raw, "section_lines", {}).get(sec)
            raise ConfigError(f"unknown section [{sec}]", line, path)
        for key, (val, lineno) in items.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", lineno, path)
            parse = SCHEMA[sec][key][0]
            try:
                cfg[sec][key] = parse(val)
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {exc}", lineno, path) from None
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return resolve(parse_text(text, path), path)


def dump_config(cfg):
    """Render a resolved config back to text (round-trips through ``resolve``)."""
    lines = []
    for sec in SCHEMA:
        lines.append(f"[{sec}]")
        for key, val in cfg[sec].items():
            if val is None:
                if key == "path":
                    continue
                text = "none"
            elif isinstance(val, tuple):
                text = ", ".join(str(v) for v in val)
            elif isinstance(val, bool):
                text = "true" if val else "false"
            else:
                text = str(val)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)
