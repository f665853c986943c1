"""
Independent organ motion
========================

Each organ drifts by its own offset on top of a smooth deformation. A
label-blind fit drags neighbouring organs along; decoupling the organs in the
prior lets each one move on its own.
"""

from mobcpd import configure_mode, register
from mobcpd.synth import evaluate_registration, gen_gp_case

case = gen_gp_case(seed=1, M=400, L=3, independent_motion=True)
print("true organ offsets (mm):")
print(case.offsets.round(1))

# sim: similarity only; bcpd: one organ, no labels;
# gmc: labels with global coupling; omc: labels, organs decoupled
for mode in ("sim", "bcpd", "gmc", "omc"):
    cfg = configure_mode(mode, n_labels=3)
    r = register(case.source, case.target, cfg)
    print(f"{mode:5s} TRE {evaluate_registration(case, r)['mean']:6.2f} mm  ({r.iterations} iterations)")
