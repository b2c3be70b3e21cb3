import numpy as np
import pytest

from wegmil.config import RunConfig
from wegmil.experts import GRAPH, IMAGE, Expert
from wegmil.fusion import NAIVE, WEG, GateNetwork
from wegmil.gradcheck import toy_bag


def make_models(seed=0, K=3, K_c=4, d=8, d_in=6, sigmoid_on=True, random_value=True):
    """Graph expert, image expert, naive gate, weg gate with shared widths."""
    rng = np.random.default_rng(seed)
    kw = dict(K_c=K_c, d_in=d_in, gin_layers=2, sigmoid_on=sigmoid_on)
    ge = Expert(GRAPH, K, d, rng, **kw)
    ie = Expert(IMAGE, K, d, rng, **kw)
    if random_value:
        # trained models have a nonzero value map; tests should see mixing
        for e in (ge, ie):
            e.mixer.value.weight.data[:] = rng.normal(scale=0.3, size=(d, d))
    return ge, ie, GateNetwork(NAIVE, d, rng), GateNetwork(WEG, d, rng)


@pytest.fixture
def models():
    return make_models()


@pytest.fixture
def bag():
    return toy_bag(np.random.default_rng(7), M=5, K=3, K_c=4, d_in=6)


@pytest.fixture
def small_config():
    return RunConfig(d=8, gin_layers=2, pretrain_epochs=3, gate_epochs=2, figure_bags=1)


# --- shared end-to-end runs ------------------------------------------------

class PipelineRun:
    def __init__(self, corpus, out, summary, seconds):
        self.corpus, self.out, self.summary, self.seconds = corpus, out, summary, seconds

    @property
    def manifest(self):
        return self.corpus / "manifest.json"

    def truth(self):
        from wegmil.synth import read_truth
        return read_truth(self.corpus / "truth.json")

    def splits(self):
        import json
        return json.loads((self.out / "splits.json").read_text())

    def report(self, bag_id):
        import json
        return json.loads((self.out / "reports" / f"{bag_id}.explanation.json").read_text())


def _pipeline_run(tmp_path_factory, name, spec, config=None):
    import time

    from wegmil.pipeline import run_pipeline
    from wegmil.synth import gen_synth

    root = tmp_path_factory.mktemp(name)
    manifest = gen_synth(spec, root / "corpus")
    start = time.perf_counter()
    summary = run_pipeline(config or RunConfig(), manifest, root / "run")
    return PipelineRun(root / "corpus", root / "run", summary, time.perf_counter() - start)


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """Default planted corpus (3 classes x 100 bags, M=16, both modalities) through `run`."""
    from wegmil.synth import SyntheticSpec
    return _pipeline_run(tmp_path_factory, "full", SyntheticSpec(seed=0))


@pytest.fixture(scope="session")
def weak_graph_run(tmp_path_factory):
    """Strong image signal, weak graph signal."""
    from wegmil.synth import SyntheticSpec
    return _pipeline_run(tmp_path_factory, "weak_graph",
                         SyntheticSpec(seed=1, image_strength=6.0, graph_strength=0.3))


# --- acceptance summary ----------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
