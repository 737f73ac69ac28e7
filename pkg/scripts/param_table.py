"""Print toy and full-width parameter counts for every ablation preset.

    python3 scripts/param_table.py
"""

from strippool.ablation import param_summary
from strippool.network import PRESETS


def main():
    print(f"{'preset':<12} {'toy':>10} {'full':>13} {'delta (full)':>14}")
    for preset in PRESETS:
        s = param_summary(preset)
        print(f"{preset:<12} {s['toy']:>10,} {s['full']:>13,} {s['delta_full'] / 1e6:>+13.2f}M")


if __name__ == "__main__":
    main()
