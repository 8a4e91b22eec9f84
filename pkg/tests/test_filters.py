import numpy as np
import pytest

from dkf.filters import (ALGORITHMS, FilterError, FilterOptions, ci_step,
                         ckf_step, filter_step, hcmci_step, info_vectors,
                         init_filter_state, modified_cm_step, run_filter)
from dkf.linalg import sym_inv
from dkf.network import (ConsensusNetwork, build_named_topology,
                         build_random_geometric)
from dkf.riccati import (fused_observation, solve_hcre_info,
                         steady_modified_cm, modified_info_terms)
from dkf.system import (PlantModel, SensorSuite, cycle_types,
                        make_tracking_model, make_tracking_sensors, simulate)


@pytest.fixture(scope="module")
def plant():
    return make_tracking_model(0.1)


@pytest.fixture(scope="module")
def six_ring(plant):
    net = build_named_topology("circle", 6)
    sensors = make_tracking_sensors(cycle_types(6))
    traj = simulate(plant, sensors, 40, 3)
    return net, sensors, traj


def reference_local_kalman(plant, c, r, measurements):
    """Textbook information-form Kalman filter, independent of the package's
    linear-algebra helpers."""
    x = plant.x0_mean.copy()
    p = plant.p0.copy()
    out = []
    rinv = np.linalg.inv(r)
    for y in measurements:
        x = plant.a @ x
        p = plant.a @ p @ plant.a.T + plant.q
        i_prior = np.linalg.inv(p)
        i_post = i_prior + c.T @ rinv @ c
        p = np.linalg.inv(i_post)
        x = p @ (i_prior @ x + c.T @ rinv @ y)
        out.append(x.copy())
    return np.array(out)


def test_single_node_degeneracy_matches_local_kalman(plant):
    net1 = ConsensusNetwork(1, frozenset(), np.array([[1.0]]))
    c = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    r = 0.01 * np.eye(2)
    suite = SensorSuite(c=[c], r=[r])
    traj = simulate(plant, suite, 40, 11)
    ref = reference_local_kalman(plant, c, r,
                                 [traj.measurement_at(k)[0] for k in range(1, 41)])
    for alg in ("ckf", "cm", "ci", "hcmci", "mcm-direct", "mci-direct"):
        hist = run_filter(alg, traj, net1, 3, plant, suite, rng=5)
        assert np.max(np.abs(hist.x_post[:, 0] - ref)) < 1e-10, alg


def test_hcmci_omega_one_is_ci_bit_exact(plant, six_ring):
    net, sensors, traj = six_ring
    h_ci = run_filter("ci", traj, net, 2, plant, sensors, rng=1)
    h_h1 = run_filter("hcmci", traj, net, 2, plant, sensors,
                      options=FilterOptions(omega=1.0), rng=1)
    assert np.array_equal(h_ci.x_post, h_h1.x_post)
    assert np.array_equal(h_ci.p_post, h_h1.p_post)


def test_modified_cm_complete_graph_equals_ckf(plant, six_ring):
    _, sensors, traj = six_ring
    netc = build_named_topology("complete", 6)
    h_mcm = run_filter("mcm-direct", traj, netc, 1, plant, sensors, rng=2)
    h_ckf = run_filter("ckf", traj, netc, 1, plant, sensors, rng=2)
    spread = np.max(np.abs(h_mcm.x_post - h_ckf.x_post[:, [0] * 6]))
    assert spread < 1e-8


def test_cm_large_gamma_approaches_ckf(plant, six_ring):
    net, sensors, traj = six_ring
    h_cm = run_filter("cm", traj, net, 200, plant, sensors, rng=2)
    h_ckf = run_filter("ckf", traj, net, 200, plant, sensors, rng=2)
    assert np.max(np.abs(h_cm.x_post - h_ckf.x_post[:, [0] * 6])) < 1e-8


def test_fused_prior_information_matches_central_computation(plant, six_ring):
    # CI posterior must equal the centrally evaluated update built from the
    # per-node priors: information fusion is just multiplication by L^gamma
    net, sensors, traj = six_ring
    gamma = 3
    hist = run_filter("ci", traj, net, gamma, plant, sensors, rng=1)
    lg = net.power(gamma)
    infos = sensors.info_matrices()
    s_gamma = np.einsum("ij,jab->iab", lg, infos)
    for k in (5, 20, 39):
        v = np.stack([np.linalg.inv(hist.p_prior[k, j]) for j in range(6)])
        v_fused = np.einsum("ij,jab->iab", lg, v)
        for i in range(6):
            p_central = np.linalg.inv(v_fused[i] + s_gamma[i])
            assert np.max(np.abs(p_central - hist.p_post[k, i])) < 1e-10


def test_covariances_remain_symmetric_psd(plant, six_ring):
    net, sensors, traj = six_ring
    for alg in ALGORITHMS:
        hist = run_filter(alg, traj, net, 2, plant, sensors, rng=7)
        for arr in (hist.p_prior, hist.p_post):
            assert np.max(np.abs(arr - arr.transpose(0, 1, 3, 2))) < 1e-12
            eig = np.linalg.eigvalsh(arr.reshape(-1, 4, 4))
            assert eig.min() > -1e-10


def test_run_filter_deterministic(plant, six_ring):
    net, sensors, traj = six_ring
    for alg in ("mcm-direct", "mcm-stoch"):
        a = run_filter(alg, traj, net, 2, plant, sensors, rng=13)
        b = run_filter(alg, traj, net, 2, plant, sensors, rng=13)
        assert np.array_equal(a.x_post, b.x_post)
        assert np.array_equal(a.p_post, b.p_post)


def test_ckf_zero_information_keeps_prior(plant):
    net = build_named_topology("circle", 3)
    suite = SensorSuite(c=[np.zeros((1, 4))] * 3, r=[np.eye(1)] * 3,
                        node_types=[3, 3, 3])
    traj = simulate(plant, suite, 10, 1)
    st = init_filter_state("ckf", plant, suite, net, 1)
    for k in range(1, 11):
        x_pred = plant.a @ st.x_post[0, 0]
        ckf_step(st, traj.measurement_at(k))
        assert np.max(np.abs(st.x_post[0, 0] - x_pred)) < 1e-12
        assert np.max(np.abs(st.x_post - st.x_prior)) < 1e-12


def test_ckf_near_noiseless_tracks_truth():
    tiny = 1e-10
    plant = PlantModel(a=make_tracking_model(0.1).a, q=tiny * np.eye(4),
                       x0_mean=np.array([150.0, 0.0, 150.0, 0.0]),
                       p0=100.0 * np.eye(4))
    suite = SensorSuite(c=[np.eye(4)], r=[tiny * np.eye(4)])
    net = ConsensusNetwork(1, frozenset(), np.array([[1.0]]))
    traj = simulate(plant, suite, 30, 5)
    hist = run_filter("ckf", traj, net, 1, plant, suite)
    err = hist.x_post[5:, 0] - traj.states[6:]
    assert np.max(np.abs(err)) < 1e-4


def test_named_steps_validate_algorithm(plant, six_ring):
    net, sensors, traj = six_ring
    st = init_filter_state("cm", plant, sensors, net, 2)
    with pytest.raises(FilterError):
        ckf_step(st, traj.measurement_at(1))
    with pytest.raises(FilterError):
        modified_cm_step(st, traj.measurement_at(1))
    with pytest.raises(FilterError):
        init_filter_state("kalman", plant, sensors, net, 1)
    with pytest.raises(FilterError):
        init_filter_state("cm", plant, sensors, net, 0)


def test_modified_cm_prior_covariance_converges_to_theory(plant):
    net = build_random_geometric(20, 300, 100, 8)
    sensors = make_tracking_sensors(cycle_types(20))
    gamma = 4
    traj = simulate(plant, sensors, 250, 2)
    hist = run_filter("mcm-direct", traj, net, gamma, plant, sensors, rng=3)
    ct, rt = fused_observation(net.power(gamma), sensors)
    p_theory = steady_modified_cm(plant, ct, rt)
    gap = max(np.linalg.norm(hist.p_prior[-1, i] - p_theory[i], 2)
              for i in range(20))
    assert gap < 1e-6


def test_modified_ci_prior_covariance_converges_to_hcre(plant):
    net = build_random_geometric(20, 300, 100, 8)
    sensors = make_tracking_sensors(cycle_types(20))
    gamma = 4
    lg = net.power(gamma)
    traj = simulate(plant, sensors, 250, 4)
    hist = run_filter("mci-direct", traj, net, gamma, plant, sensors, rng=5)
    ct, rt = fused_observation(lg, sensors)
    p_theory = solve_hcre_info(plant.a, modified_info_terms(ct, rt), plant.q, lg)
    gap = max(np.linalg.norm(hist.p_prior[-1, i] - p_theory[i], 2)
              for i in range(20))
    assert gap < 1e-6


def test_naive_mode_matches_full_width(plant, six_ring):
    # zero-information nodes can use reduced q rows without changing results
    net, sensors, traj = six_ring
    full = run_filter("mcm-direct", traj, net, 2, plant, sensors, rng=17)
    naive = run_filter("mcm-direct", traj, net, 2, plant, sensors,
                       options=FilterOptions(naive_mode=True), rng=17)
    assert np.max(np.abs(full.x_post - naive.x_post)) < 1e-9
    p_scale = 1.0 + np.max(np.abs(full.p_post))
    assert np.max(np.abs(full.p_post - naive.p_post)) < 1e-9 * p_scale


def test_freeze_qws_flag(plant, six_ring):
    # on a complete graph the direct estimate is exact from the first step,
    # so freezing changes nothing but stops the estimator updates
    _, sensors, traj = six_ring
    netc = build_named_topology("complete", 6)
    plain = run_filter("mcm-direct", traj, netc, 1, plant, sensors, rng=19)
    st = init_filter_state("mcm-direct", plant, sensors, netc, 1,
                           options=FilterOptions(freeze_qws=True),
                           rng=np.random.default_rng(19))
    for k in range(1, 41):
        filter_step(st, traj.measurement_at(k))
    assert st.qws_frozen
    assert st.aux.k < 40  # consensus stopped once frozen
    hist_x = plain.x_post[-1]
    assert np.max(np.abs(st.x_post[0] - hist_x)) < 1e-9


def test_batched_equals_sequential_runs(plant, six_ring):
    # lock-step batching is exactly trial-by-trial execution
    net, sensors, _ = six_ring
    trajs = [simulate(plant, sensors, 15, 100 + b) for b in range(3)]
    batch_meas = [np.stack([t.measurements[i] for t in trajs])
                  for i in range(6)]
    st = init_filter_state("ci", plant, sensors, net, 2, batch=3)
    batched = []
    for k in range(1, 16):
        z = info_vectors(sensors, [m[:, k - 1] for m in batch_meas],
                         info_maps=st.info_maps)
        filter_step(st, z)
        batched.append(st.x_post.copy())
    batched = np.array(batched)  # (K, B, N, n)
    for b, traj in enumerate(trajs):
        hist = run_filter("ci", traj, net, 2, plant, sensors)
        assert np.max(np.abs(hist.x_post - batched[:, b])) < 1e-12


def test_stochastic_modes_track_direct_in_steady_state(plant):
    # the stochastic covariance estimate converges, so late-horizon estimates
    # agree with the direct mode to a few percent on average
    net = build_named_topology("circle", 6)
    sensors = make_tracking_sensors(cycle_types(6))
    rng = np.random.default_rng(23)
    trials = 200
    steps = 150
    batch_meas = None
    states = np.empty((trials, steps + 1, 4))
    metas = []
    for b in range(trials):
        t = simulate(plant, sensors, steps, 500 + b)
        states[b] = t.states
        metas.append(t.measurements)
    batch_meas = [np.stack([m[i] for m in metas]) for i in range(6)]

    def steady_mse(alg):
        st = init_filter_state(alg, plant, sensors, net, 2, batch=trials,
                               rng=np.random.default_rng(29))
        acc = 0.0
        count = 0
        for k in range(1, steps + 1):
            z = info_vectors(sensors, [m[:, k - 1] for m in batch_meas],
                             info_maps=st.info_maps)
            filter_step(st, z)
            if k > steps * 3 // 4:
                err = st.x_post - states[:, k][:, None, :]
                acc += float(np.mean(np.sum(err**2, axis=-1)))
                count += 1
        return acc / count

    m_direct = steady_mse("mcm-direct")
    m_stoch = steady_mse("mcm-stoch")
    assert abs(m_stoch - m_direct) / m_direct < 0.05
