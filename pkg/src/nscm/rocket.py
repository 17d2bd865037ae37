"""Longitudinal rocket benchmark (angle of attack, pitch rate).

Tail-controlled airframe with cubic / quadratic aerodynamic polynomials in the
angle of attack (in degrees) and a Mach number swept linearly in time::

    C_n = a_n a^3 + b_n a|a| + c_n (2 - M/3) a + d_n delta
    C_m = a_m a^3 + b_m a|a| + c_m (-7 + 8M/3) a + d_m delta
    phi' = K_a M cos(phi) C_n + q
    q'   = K_q M^2 C_m

with ``K_a = 0.7 P0 S / (m v_s)``, ``K_q = 0.7 P0 S d / I_y`` and
``K_z = 0.7 P0 S / (m g)``.  The input is the fin deflection in radians;
measurements are the pitch rate and the specific normal force ``K_z M^2 C_n``
(fin contribution excluded).  Coefficients live in a TOML file, see
``data/rocket.toml`` for the documented schema.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .config import load_toml
from .dynamics import ConfigurationError, NoiseBounds, StateBox, SystemModel, estimate_c_bar
from .seeding import stream

R2D = 180.0 / np.pi

COEFFICIENTS = (
    "P0", "S_ref", "mass", "v_sound", "diameter", "I_y", "g0",
    "a_n", "b_n", "c_n", "d_n", "a_m", "b_m", "c_m", "d_m",
    "mach_start", "mach_end", "t_final", "g_c", "g_e", "d",
)

DEFAULT_CONFIG = Path(__file__).with_name("data") / "rocket.toml"


@dataclasses.dataclass(frozen=True)
class RocketCoefficients:
    K_a: float
    K_q: float
    K_z: float
    a_n: float
    b_n: float
    c_n: float
    d_n: float
    a_m: float
    b_m: float
    c_m: float
    d_m: float
    mach_start: float
    mach_end: float
    t_final: float

    def mach(self, t):
        s = np.clip(np.asarray(t, dtype=float) / self.t_final, 0.0, 1.0)
        return self.mach_start + (self.mach_end - self.mach_start) * s

    def normal_coeff(self, phi, M):
        a = phi * R2D
        return self.a_n * a**3 + self.b_n * a * np.abs(a) + self.c_n * (2.0 - M / 3.0) * a

    def moment_coeff(self, phi, M):
        a = phi * R2D
        return self.a_m * a**3 + self.b_m * a * np.abs(a) + self.c_m * (-7.0 + 8.0 * M / 3.0) * a

    def normal_slope(self, phi, M):
        a = phi * R2D
        return R2D * (3.0 * self.a_n * a**2 + 2.0 * self.b_n * np.abs(a) + self.c_n * (2.0 - M / 3.0))

    def moment_slope(self, phi, M):
        a = phi * R2D
        return R2D * (3.0 * self.a_m * a**2 + 2.0 * self.b_m * np.abs(a) + self.c_m * (-7.0 + 8.0 * M / 3.0))


def _coefficients(table: dict) -> RocketCoefficients:
    missing = [k for k in COEFFICIENTS if k not in table]
    if missing:
        raise ConfigurationError(f"rocket config missing coefficients: {', '.join(missing)}")
    c = {k: float(table[k]) for k in COEFFICIENTS}
    if c["t_final"] <= 0:
        raise ConfigurationError("t_final must be positive")
    qS = 0.7 * c["P0"] * c["S_ref"]
    return RocketCoefficients(
        K_a=qS / (c["mass"] * c["v_sound"]),
        K_q=qS * c["diameter"] / c["I_y"],
        K_z=qS / (c["mass"] * c["g0"]),
        **{k: c[k] for k in ("a_n", "b_n", "c_n", "d_n", "a_m", "b_m", "c_m", "d_m",
                             "mach_start", "mach_end", "t_final")},
    )


def load_rocket_config(path=None) -> dict:
    return load_toml(path or DEFAULT_CONFIG)["rocket"]


def rocket_benchmark(config=None, *, c_bar: float | None = None, seed: int = 0) -> SystemModel:
    """Build the rocket :class:`SystemModel` from a coefficient table or TOML path.

    ``c_bar`` (bound on the measurement SDC matrix) is estimated by sampling
    when not given in the table or as an argument.
    """
    if config is None or isinstance(config, (str, Path)):
        config = load_rocket_config(config)
    k = _coefficients(config)
    n = 2
    g_c, g_e, d = float(config["g_c"]), float(config["g_e"]), float(config["d"])
    eye = np.eye(n)

    def f(x, t):
        phi, q = x[..., 0], x[..., 1]
        M = k.mach(t)
        return np.stack([k.K_a * M * np.cos(phi) * k.normal_coeff(phi, M) + q,
                         k.K_q * M**2 * k.moment_coeff(phi, M)], axis=-1)

    def B(x, t):
        phi = x[..., 0]
        M = k.mach(t)
        col = np.stack([k.K_a * M * np.cos(phi) * k.d_n * R2D,
                        np.broadcast_to(k.K_q * M**2 * k.d_m * R2D, phi.shape)], axis=-1)
        return col[..., None]

    def h(x, t):
        phi, q = x[..., 0], x[..., 1]
        M = k.mach(t)
        return np.stack([q, np.broadcast_to(k.K_z * M**2 * k.normal_coeff(phi, M), q.shape)], axis=-1)

    def f_jac(x, t):
        phi = x[..., 0]
        M = np.broadcast_to(k.mach(t), phi.shape)
        J = np.zeros(phi.shape + (2, 2))
        J[..., 0, 0] = k.K_a * M * (-np.sin(phi) * k.normal_coeff(phi, M) + np.cos(phi) * k.normal_slope(phi, M))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = k.K_q * M**2 * k.moment_slope(phi, M)
        return J

    def B_jac(x, t):
        phi = x[..., 0]
        M = np.broadcast_to(k.mach(t), phi.shape)
        J = np.zeros(phi.shape + (2, 1, 2))
        J[..., 0, 0, 0] = -k.K_a * M * np.sin(phi) * k.d_n * R2D
        return J

    def h_jac(x, t):
        phi = x[..., 0]
        M = np.broadcast_to(k.mach(t), phi.shape)
        J = np.zeros(phi.shape + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = k.K_z * M**2 * k.normal_slope(phi, M)
        return J

    def const(mat):
        return lambda x, t: np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape)

    box_cfg = config.get("box", {})
    try:
        box = StateBox(np.asarray(box_cfg["lower"], float), np.asarray(box_cfg["upper"], float),
                       np.array([0.0]), np.array([k.t_final]), ("t",))
    except KeyError as exc:
        raise ConfigurationError(f"rocket config missing box limit {exc}") from None

    model = SystemModel(
        n=n, m=1, f=f, B=B, G_c=const(g_c * eye), G_e=const(g_e * eye), h=h, D=const(d * eye),
        box=box, f_jac=f_jac, B_jac=B_jac, h_jac=h_jac, kink_coords=(0,), batched=True, name="rocket",
    )
    if c_bar is None:
        c_bar = config.get("c_bar")
    if c_bar is None:
        c_bar = estimate_c_bar(model, stream(seed, "c_bar"), t_range=(0.0, k.t_final))
    bounds = NoiseBounds(g_c=g_c * np.sqrt(n), g_e=g_e * np.sqrt(n), d_bar=d * np.sqrt(n), c_bar=float(c_bar))
    model = dataclasses.replace(model, bounds=bounds)
    object.__setattr__(model, "coefficients", k)
    return model
