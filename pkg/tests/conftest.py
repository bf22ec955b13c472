"""Shared helpers: tiny independent simulators and parameter builders."""

import numpy as np

from epiaug.models import ParameterVector, PopulationHistory


def make_theta(model, beta=0.7, gamma=0.9, mu=0.5, rho=0.4, phi=None, p0=None):
    if p0 is None:
        p0 = np.full(model.n_states, 1.0 / model.n_states)
    g = gamma if "gamma" in model.params else None
    return ParameterVector(beta=beta, mu=mu, gamma=g, rho=rho, phi=phi, p0=np.asarray(p0))


def subject_level_sim(rng, model, theta, init_states, t0, t_end):
    """Forward-simulate every subject's competing clocks, one event at a time.

    Kept deliberately naive (and independent of the package simulator) so it
    can serve as an oracle.
    """
    states = np.array(init_states, dtype=int)
    t = t0
    times, subjects, frms, tos = [], [], [], []
    while True:
        i_count = int(np.sum(states == model.infectious))
        rates, moves = [], []
        for j, s in enumerate(states):
            for tr in model.exits(int(s)):
                r = theta.beta * i_count if tr.param == "beta" else theta.rate(tr.param)
                if r > 0:
                    rates.append(r)
                    moves.append((j, tr.src, tr.dst))
        total = sum(rates)
        if total == 0:
            break
        t = t + rng.exponential(1.0 / total)
        if t >= t_end:
            break
        k = rng.choice(len(rates), p=np.array(rates) / total)
        j, frm, to = moves[k]
        times.append(t)
        subjects.append(j)
        frms.append(frm)
        tos.append(to)
        states[j] = to
    return PopulationHistory(
        model, init_states, np.array(times), np.array(subjects),
        np.array(frms, dtype=int), np.array(tos, dtype=int), t0, t_end,
    )
