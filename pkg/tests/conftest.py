import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from acelsr import ace, datastore, learncore as lc, mapping, sim

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def cfg():
    return sim.SimConfig()


@pytest.fixture(scope="session")
def graph(cfg):
    return sim.ground_truth_graph(cfg)


@pytest.fixture(scope="session")
def oracle(cfg):
    return sim.StateIndicatorEncoder(cfg)


@pytest.fixture(scope="session")
def small_ds(cfg):
    return datastore.generate_dataset(cfg, 300, 0.2, seed=5)


@pytest.fixture(scope="session")
def tiny_models(small_ds):
    """Briefly trained models; good enough for plumbing tests, not for accuracy."""
    pc = ace.PipelineConfig(mm_train=lc.TrainConfig(epochs=3, seed=0), lpm_train=lc.TrainConfig(epochs=5, seed=0),
                            sm_train=lc.TrainConfig(epochs=5, seed=0), latent_dim=8)
    models = ace.train_models(small_ds, pc)
    return models, mapping.latent_stats(models.mm, small_ds), pc


class OracleDynamics:
    """Exact latent dynamics for the state-indicator embedding."""

    def __init__(self, cfg, scale=10.0):
        self.graph = sim.ground_truth_graph(cfg)
        self.scale = scale
        self.n_actions = len(self.graph.actions)

    def predict(self, z, u):
        z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
        u1 = np.atleast_1d(u)
        if len(z2) == 1 and len(u1) > 1:
            z2 = np.repeat(z2, len(u1), axis=0)
        elif len(u1) == 1 and len(z2) > 1:
            u1 = np.repeat(u1, len(z2))
        out = np.zeros_like(z2)
        for k, (row, a) in enumerate(zip(z2, u1)):
            s = int(np.argmax(row))
            t = self.graph.succ[s].get(int(a))
            # invalid actions go far outside every covered state
            if t is None:
                out[k] = -100.0
            else:
                out[k, t] = self.scale
        return out[0] if np.ndim(z) == 1 and np.ndim(u) == 0 else out


class OracleSuggester:
    """``encode`` maps observations to state ids; used with an index built over the true action sets."""

    def __init__(self, cfg):
        self.enc = sim.StateIndicatorEncoder(cfg)

    def encode(self, obs):
        return self.enc.encode(obs)


def oracle_index(cfg, ds):
    from acelsr.suggestion import _finish_index
    g = sim.ground_truth_graph(cfg)
    obs, _, _ = datastore.action_anchors(ds)
    enc = sim.StateIndicatorEncoder(cfg)
    emb = enc.encode(obs).astype(np.float32)
    labels = enc.labels(obs)
    cluster_of: dict = {}
    cl = np.array([cluster_of.setdefault(int(s), len(cluster_of)) for s in labels])
    acts = [frozenset(g.succ[int(s)]) for s in labels]
    return _finish_index(emb, cl, acts)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
