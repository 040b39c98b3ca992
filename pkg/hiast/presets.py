"""Named experiment variants and the default sensitivity grids.

Each preset is a function of a base ExperimentConfig so that data, seeds
and budgets stay whatever the caller configured.
"""

import math

from hiast.schemas import AblationSwitches, ExperimentConfig

# ── Sensitivity grids ─────────────────────────────────────────────────

ALPHA_GRID = [0.1, 0.3, 0.5, 0.7, 0.9]
GAMMA_GRID = [1.0, 4.0, 8.0, 16.0, 32.0]
LAMBDA_I_GRID = [0.1, 0.5, 1.0, 5.0, 10.0]
LAMBDA_CST_GRID = [0.1, 0.5, 1.0, 5.0, 10.0]


def k_grid(num_classes: int) -> list[int]:
    """Hard-class counts around the default ceil(C/2), clipped to [1, C]."""
    k = math.ceil(num_classes / 2)
    return [v for v in (k - 1, k, k + 1) if 1 <= v <= num_classes]


def sensitivity_grid(param: str, num_classes: int) -> list[float]:
    grids = {
        "alpha": ALPHA_GRID,
        "gamma": GAMMA_GRID,
        "lambda_i": LAMBDA_I_GRID,
        "lambda_cst": LAMBDA_CST_GRID,
        "k": [float(v) for v in k_grid(num_classes)],
    }
    if param not in grids:
        raise KeyError(f"no default grid for {param!r}")
    return list(grids[param])


# ── Module combinations ───────────────────────────────────────────────

def with_switches(base: ExperimentConfig, **switches: bool) -> ExperimentConfig:
    merged = base.switches.model_dump() | switches
    return base.model_copy(update={"switches": AblationSwitches(**merged)})


def iast(base: ExperimentConfig) -> ExperimentConfig:
    """IAS pseudo-labels with the two region regularizers; no HPLA, no consistency."""
    return with_switches(base, ias=True, r_c=True, r_i=True, hpla=False, r_cst=False)


def hiast(base: ExperimentConfig) -> ExperimentConfig:
    return with_switches(base, ias=True, r_c=True, r_i=True, hpla=True, r_cst=True)


# Modules added cumulatively, in this order.
LADDER = [
    ("ias", {"ias": True, "r_c": False, "r_i": False, "hpla": False, "r_cst": False}),
    ("ias+r_c", {"ias": True, "r_c": True, "r_i": False, "hpla": False, "r_cst": False}),
    ("ias+r_c+r_i", {"ias": True, "r_c": True, "r_i": True, "hpla": False, "r_cst": False}),
    ("ias+r_c+r_i+hpla", {"ias": True, "r_c": True, "r_i": True, "hpla": True, "r_cst": False}),
    ("hiast", {"ias": True, "r_c": True, "r_i": True, "hpla": True, "r_cst": True}),
]

SWITCH_OFF = ["ias", "hpla", "r_i", "r_c", "r_cst"]


def ablation_ladder(base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    return [(name, with_switches(base, **sw)) for name, sw in LADDER]


def switch_off_table(base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Full HIAST, then HIAST with one module removed per row."""
    full = hiast(base)
    rows = [("hiast", full)]
    rows += [(f"no-{name}", with_switches(full, **{name: False})) for name in SWITCH_OFF]
    return rows



# ── Benchmark ─────────────────────────────────────────────────────────

def benchmark(base: ExperimentConfig | None = None) -> ExperimentConfig:
    """The long-tail benchmark used for end-to-end comparisons.

    C=8 classes, 200 images per domain at 64x64, three rounds. Everything
    else (seeds, switches, selector settings) comes from ``base``.
    """
    base = base or ExperimentConfig()
    synth = base.synth.model_copy(update={"num_classes": 8, "images_per_domain": 200, "height": 64, "width": 64})
    return ExperimentConfig.model_validate(base.model_dump() | {
        "synth": synth.model_dump(),
        "rounds": 3,
        "iterations_per_round": 250,
        "warmup_iterations": 300,
        "batch_size": 4,
    })


PRESETS = {"benchmark": benchmark}
