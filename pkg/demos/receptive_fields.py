"""Receptive fields of the three feature taps, analytic versus impulse probe.

    python3 demos/receptive_fields.py
"""

from sanet import ModelConfig, build, impulse_support, receptive_field
from sanet.model import prefix_chain


def main():
    model = build(ModelConfig("s"), None)
    for prefix in ("l3", "dp2", "l6"):
        chain = prefix_chain(model, prefix)
        rf = receptive_field(chain)
        box = impulse_support(model, prefix, (1024, 1024))
        print(f"{prefix:4} {len(chain):3} convs  analytic {rf[0]}x{rf[1]}  impulse {box.height}x{box.width}")


if __name__ == "__main__":
    main()
