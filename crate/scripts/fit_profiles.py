"""Least-squares fit of K-component Gaussian scale mixtures to the exponential
and de Vaucouleurs radial profiles.

Radii are measured in units of the half-light radius, so both fitted mixtures
have (approximately) unit half-light radius and unit mass. Prints the table as
a Rust constant block.
"""
import numpy as np
from scipy.optimize import least_squares
from scipy.special import gammaincinv

K = 8
R_MAX = 8.0


def exp_profile(r):
    # Sersic n=1 written in half-light units: b_1 = gammaincinv(2, 0.5)
    b = gammaincinv(2.0, 0.5)
    return np.exp(-b * r)


def dev_profile(r):
    return np.exp(-7.669 * (r ** 0.25 - 1.0))


def normalized(profile, r):
    # unit mass over the plane, integrated on (0, R_MAX]
    grid = np.linspace(1e-6, R_MAX, 200001)
    mass = np.trapezoid(2 * np.pi * grid * profile(grid), grid)
    return profile(r) / mass


def mixture(params, r):
    log_w, log_tau = params[:K], params[K:]
    w = np.exp(log_w)
    tau = np.exp(log_tau)
    out = np.zeros_like(r)
    for wj, tj in zip(w, tau):
        out += wj * np.exp(-0.5 * r * r / tj) / (2 * np.pi * tj)
    return out


def fit(profile, tau0):
    r = np.concatenate([np.geomspace(1e-3, 0.1, 200), np.linspace(0.1, R_MAX, 800)])
    target = normalized(profile, r)
    # weight residuals by the annulus area so the fit is in light, not surface brightness
    weight = np.sqrt(2 * np.pi * r * np.gradient(r))
    x0 = np.concatenate([np.log(np.full(K, 1.0 / K)), np.log(tau0)])

    def resid(p):
        return weight * (mixture(p, r) - target)

    sol = least_squares(resid, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200000)
    w = np.exp(sol.x[:K])
    tau = np.exp(sol.x[K:])
    order = np.argsort(tau)
    w, tau = w[order], tau[order]
    return w / w.sum(), tau, sol.cost


def main():
    dev = fit(dev_profile, np.geomspace(1e-4, 6.0, K))
    exp = fit(exp_profile, np.geomspace(1e-2, 2.0, K))
    for name, (w, tau, cost) in (("DEV", dev), ("EXP", exp)):
        print(f"// {name}: residual cost {cost:.3e}")
        print(f"const {name}_WEIGHTS: [f64; {K}] = [")
        for v in w:
            print(f"    {float(v)!r},")
        print("];")
        print(f"const {name}_SCALES: [f64; {K}] = [")
        for v in tau:
            print(f"    {float(v)!r},")
        print("];")


if __name__ == "__main__":
    main()
