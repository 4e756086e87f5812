import numpy as np
import pytest

from nmcdr.synth import SyntheticSpec, generate, write


def test_same_seed_same_files(tmp_path):
    spec = SyntheticSpec(users=120, items=80, seed=4)
    a = write(generate(spec), tmp_path / "a")
    b = write(generate(spec), tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
    c = write(generate(SyntheticSpec(users=120, items=80, seed=5)), tmp_path / "c")
    assert a["Z"].read_bytes() != c["Z"].read_bytes()


def test_heavy_tail_degree_ratio():
    data = generate(SyntheticSpec(users=1000, items=2000, tail_exponent=1.5, seed=0))
    deg = np.bincount([u for u, _, _ in data.edges[0]], minlength=1000)
    assert deg.max() / np.median(deg) > 10


def test_full_overlap_noise_free_top_items_agree():
    spec = SyntheticSpec(users=50, items=60, overlap=1.0, noise=0.0, seed=1, tail_exponent=0.0)
    data = generate(spec)
    assert set(data.user_keys[0]) == set(data.user_keys[1])
    zb_index = {k: j for j, k in enumerate(data.user_keys[1])}
    np.testing.assert_allclose(data.rotation @ data.rotation.T, np.eye(spec.rank), atol=1e-12)
    items = [{}, {}]
    for d in (0, 1):
        for u, i, _ in data.edges[d]:
            items[d].setdefault(u, set()).add(i)
    for u, key in enumerate(data.user_keys[0]):
        assert items[0][u] == items[1][zb_index[key]]


def test_shared_users_have_rotated_factors():
    data = generate(SyntheticSpec(users=40, items=30, overlap=0.5, seed=2))
    shared = [k for k in data.user_keys[1] if k.startswith("u")]
    assert len(shared) == 20
    for j, k in enumerate(data.user_keys[1][:20]):
        u = data.user_keys[0].index(k)
        np.testing.assert_allclose(data.user_factors[1][j], data.user_factors[0][u] @ data.rotation, atol=1e-12)


@pytest.mark.parametrize("kw", [{"rank": 0}, {"overlap": 1.5}, {"items": 8, "min_degree": 5},
                                {"noise": -1.0}])
def test_infeasible_specs_rejected(kw):
    with pytest.raises(ValueError):
        generate(SyntheticSpec(**kw))
