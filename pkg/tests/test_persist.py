import numpy as np
import pytest

from prefhedge import (
    ConfigError,
    ModelParams,
    default_grid,
    load_h_surface,
    load_policy_surface,
    save_h_surface,
    save_policy_surface,
    solve_h,
)
from prefhedge.equilibrium import policy_from_h

P = ModelParams(r=0.02, mu_S=0.07, sigma_S=0.2, rho=0.6,
                mu_Y=0.02, sigma_Y=0.04, T=40.0, y0=np.log(2.0))


@pytest.fixture(scope="module")
def solved():
    grid = default_grid(P, n_t_steps=40, n_y=81, n_ybar=7)
    h = solve_h(0.3, grid, P)
    pol = policy_from_h(h, grid, P)
    return grid, h, pol


def test_h_surface_round_trip(tmp_path, solved):
    grid, h, _ = solved
    path = tmp_path / "h.bin"
    save_h_surface(path, h, P)
    back = load_h_surface(path, P)
    assert np.array_equal(back.values, h.values)
    assert np.array_equal(back.grid.t_nodes, grid.t_nodes)
    assert np.array_equal(back.grid.ybar_nodes, grid.ybar_nodes)
    assert back.grid.eps_T == grid.eps_T
    assert back.grid.band_sd == grid.band_sd


def test_policy_surface_round_trip(tmp_path, solved):
    _, _, pol = solved
    path = tmp_path / "p.bin"
    save_policy_surface(path, pol, P)
    back = load_policy_surface(path, P)
    assert np.array_equal(back.pi, pol.pi)
    assert np.array_equal(back.myopic, pol.myopic)
    assert np.array_equal(back.hedging, pol.hedging)


def test_bit_flip_is_detected(tmp_path, solved):
    _, h, _ = solved
    path = tmp_path / "h.bin"
    save_h_surface(path, h, P)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x40
    path.write_bytes(bytes(blob))
    with pytest.raises(ConfigError, match="checksum"):
        load_h_surface(path, P)


def test_wrong_params_hash_is_detected(tmp_path, solved):
    _, h, _ = solved
    path = tmp_path / "h.bin"
    save_h_surface(path, h, P)
    other = ModelParams(r=0.03, mu_S=0.07, sigma_S=0.2, rho=0.6,
                        mu_Y=0.02, sigma_Y=0.04, T=40.0, y0=np.log(2.0))
    with pytest.raises(ConfigError, match="hash"):
        load_h_surface(path, other)
    # loading without params skips the hash check
    assert load_h_surface(path) is not None


def test_wrong_magic_is_rejected(tmp_path, solved):
    _, h, pol = solved
    hp = tmp_path / "h.bin"
    save_h_surface(hp, h, P)
    with pytest.raises(ConfigError, match="container"):
        load_policy_surface(hp, P)
