"""Replicate-scale recovery checks. Run with BACON_RUN_SLOW=1; each test takes tens of minutes."""
import numpy as np
import pytest

from benchmark_scaling import linear_fit, time_grid
from config_run import RunConfig
from core.gibbs import ChainData, gibbs_sweep, initialize_chain
from core.model import sample_pdp_partition
from evaluation.replicates import run_replicates
from shared.models import ContaminationModel, PdpHyper, SweepSchedule

pytestmark = pytest.mark.slow

REPLICATES = 10


def replicate_table(tmp_path, protocol, params, **overrides):
    base = RunConfig(
        run_dir=str(tmp_path / protocol),
        burn_in=2000, kept=3000, thin=5, log_every=10**6, workers=4, seed=100,
        **overrides,
    )
    frame = run_replicates(protocol, params, REPLICATES, base)
    return frame.pivot_table(index="replicate", columns=["method", "metric"], values="value")


def test_bacon_generated_data(tmp_path):
    table = replicate_table(tmp_path, "bacon", {"n": 100, "p": 250, "r0": 0.925})
    bacon = table["bacon"]
    assert bacon["tau_hat"].mean() >= 0.995
    assert (bacon["q_hat"] == bacon["q0"]).sum() >= 8
    assert abs(bacon["d_ci_lo"].mean() - 0.332) <= 0.1
    assert abs(bacon["d_ci_hi"].mean() - 0.536) <= 0.1
    assert bacon["d_zero_prob"].max() < 0.01
    assert bacon["logbf_lower_mean"].mean() > 40
    assert (bacon["tau_hat"] > table["kmeans"]["tau"]).sum() >= 9


def test_threshold_normal_data(tmp_path):
    table = replicate_table(tmp_path, "threshold", {"n": 100, "p": 250, "phi0": 0.95})
    bacon = table["bacon"]
    assert bacon["tau_hat"].mean() >= 0.97
    assert bacon["logbf_lower_mean"].mean() > 5
    assert (bacon["tau_hat"] > table["kmeans"]["tau"]).sum() >= 9


def test_selection_and_prediction(tmp_path):
    params = {"n": 100, "p": 250, "size_s": 10, "beta_star": 1.2, "sigma0": 0.5}
    table = replicate_table(tmp_path, "response", params, rep_mode="b")
    bacon = table["bacon"]
    assert bacon["tpr"].mean() >= 0.85
    assert bacon["tnr"].mean() >= 0.98
    assert 8 <= np.median(bacon["model_size"]) <= 14
    median_reduction = np.median(bacon["pct_mse_reduction"])
    assert median_reduction > 0
    assert abs(median_reduction - np.median(table["oracle"]["pct_mse_reduction"])) <= 0.15


def test_sweep_cost_is_linear_in_np():
    frame = time_grid(sweeps=50, burn_in=10, phi0=0.95, seed=1)
    _, _, r2 = linear_fit(frame)
    assert r2 > 0.95


def batch_mean_se(values, batches=50):
    means = np.asarray(values, dtype=np.float64).reshape(batches, -1).mean(axis=1)
    return means.std(ddof=1) / np.sqrt(batches)


def test_successive_conditional_simulation_matches_prior():
    # Alternating a sweep with a fresh X drawn from the model leaves the prior invariant
    n, p, sweeps = 4, 5, 20000
    rng = np.random.default_rng(77)
    hyper = PdpHyper(mass=1.0, discount=0.25)
    contam = ContaminationModel()
    x = rng.integers(0, 2, (n, p)).astype(np.uint8)
    data = ChainData.from_bits(x)
    state = initialize_chain(data, hyper, contam, 1.0, rng)
    draws = {"q": [], "d": [], "p_star": [], "r0": [], "r1": []}
    for _ in range(sweeps):
        gibbs_sweep(state, data, SweepSchedule())
        channel = state.q_matrix()
        latent = state.v[:, state.labels].astype(np.int64)
        x = (rng.random((n, p)) < channel[latent, 1]).astype(np.uint8)
        data = ChainData.from_bits(x)
        for name, value in (("q", state.q), ("d", state.discount), ("p_star", state.p_star),
                            ("r0", state.r[0]), ("r1", state.r[1])):
            draws[name].append(value)

    prior_d = np.where(rng.random(50000) < hyper.discount_zero_prob, 0.0, rng.random(50000))
    prior_q = np.array([sample_pdp_partition(p, hyper.mass, d, rng).q for d in prior_d])
    prior_means = {
        "q": prior_q.mean(),
        "d": (1 - hyper.discount_zero_prob) / 2,
        "p_star": 0.5,
        "r0": (contam.r_floor + 1) / 2,
        "r1": (contam.r_floor + 1) / 2,
    }
    for name, values in draws.items():
        se = batch_mean_se(values)
        assert abs(np.mean(values) - prior_means[name]) < 4 * se + 0.01, name
