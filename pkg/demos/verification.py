"""One-call verifier across matrix and tensor shapes: legal-permutation
commutation, witnessed illegal permutations, dense-oracle agreement,
orbit counts, and (on tiny grids) a full subgroup census.

Run: python3 demos/verification.py
"""

from exchtensor.verify import run_verifier_suite

SHAPES = [(3, 4), (5, 5), (2, 2), (3, 4, 2), (2, 2, 2, 2)]

for dims in SHAPES:
    out = run_verifier_suite(dims, trials=50, seed=0)
    census = out["census"]
    census_note = (
        f", census {census['legal']}/{census['expected']} legal"
        if census is not None else ""
    )
    print(
        f"{'x'.join(map(str, dims))}: "
        f"{'PASS' if out['passed'] else 'FAIL'} "
        f"(legal dev {out['legal_max_deviation']:.1e}, "
        f"witnessed {out['illegal_witnessed']}/{out['illegal_tested']}, "
        f"oracle dev {out['oracle_max_deviation']:.1e}, "
        f"orbits {out['orbit_count']}/{out['orbit_expected']}"
        f"{census_note})"
    )
