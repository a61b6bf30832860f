"""Quick check that the compiled module imports and its main entry points work."""

import math

import asyncmis


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    r_total, r_s, r_d = asyncmis.ratio_decompose(0.3, 0.1, 0.0)
    assert close(r_s, math.exp(0.2)) and close(r_d, math.exp(0.1))
    assert close(r_total, r_s * r_d)

    assert asyncmis.ppo_active_mask(1.1, 1.0, 0.2, 0.2)
    assert not asyncmis.ppo_active_mask(1.3, 1.0, 0.2, 0.2)
    assert close(asyncmis.ppo_clip_surrogate(1.3, 1.0, 0.2, 0.2), 1.2)

    assert len(asyncmis.variants()) == 8
    assert close(asyncmis.alpha_from_gap(3), 0.25)
    assert close(asyncmis.ewma_center_of_mass(0.75), 3.0)

    rows = asyncmis.table4()
    assert len(rows) == 24
    b = asyncmis.effective_bounds("log_linear", (0.9, 1.1), (0.8, 1.2), 0.5)
    assert close(b["clip_upper_pos"], 1.44) and close(b["mask_interval"][1], 1.21)

    out = asyncmis.mis_weight(
        'variant = "decoupled_train_infer"\nclip_low = 0.2\nclip_high = 0.2\n'
        'disc_mask = { form = "multiplicative", c = 1.05 }\n',
        logp_cur=-1.0,
        logp_infer_old=-1.01,
        advantage=1.0,
        logp_train_old=-1.0,
    )
    assert out["active"] and close(out["r1"], 1.0)

    p = asyncmis.PolicyParams.random(4, 3, 0.5, 7)
    assert close(sum(math.exp(x) for x in p.log_probs(2)), 1.0)
    ew = asyncmis.EwmaState(p, beta=0.75, reset_threshold=0.9)
    ew.update(asyncmis.PolicyParams(4, 3))
    assert ew.step == 2 and close(ew.cum_weight, 1.75)

    sim = asyncmis.run_simulation("total_updates = 5\nnum_workers = 2\n")
    assert len(sim["metrics"]) == 5
    assert sim["summary"]["accounting"]["generated"] > 0

    try:
        asyncmis.run_simulation("num_workerz = 2\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
