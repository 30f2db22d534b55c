import numpy as np
import pytest

from fedsim.aggregation import AggregationRule
from fedsim.attacks import AttackConfig, Trigger
from fedsim.data import gen_synthetic, partition_noniid
from fedsim.flengine import FlSetup, train
from fedsim.models import ModelSpec

CHASH = bytes(32)


def build_setup(
    *,
    spec,
    dataset,
    n_clients,
    rule,
    eta,
    batch_size,
    seed,
    q=None,
    attack=None,
    malicious=(),
    l=1,
):
    q = q if q is not None else 1.0 / dataset.num_classes
    shards = partition_noniid(dataset, n_clients, q, seed)
    return FlSetup(
        spec=spec,
        rule=rule,
        eta=eta,
        batch_size=batch_size,
        l=l,
        seed=seed,
        client_ids=[s.client_id for s in shards],
        local_inputs={s.client_id: dataset.inputs[s.indices] for s in shards},
        local_labels={s.client_id: dataset.labels[s.indices] for s in shards},
        sizes={s.client_id: s.size for s in shards},
        attack=attack,
        malicious=frozenset(malicious),
    )


@pytest.fixture(scope="session")
def ridge_trim_scenario(tmp_path_factory):
    """Ridge model, trim attack, full-batch updates: quadratic losses make
    exact update estimation possible, which several recovery tests need."""
    dataset = gen_synthetic(4, 5, 60, 3.0, seed=21)
    spec = ModelSpec("ridge", 5, 4, l2=0.1)
    attack = AttackConfig(kind="trim", b=2.0)
    malicious = (0, 1)
    setup = build_setup(
        spec=spec,
        dataset=dataset,
        n_clients=6,
        rule=AggregationRule("fedavg"),
        eta=0.2,
        batch_size=10_000,
        seed=21,
        attack=attack,
        malicious=malicious,
    )
    path = tmp_path_factory.mktemp("ridge") / "history.bin"
    store, final_model = train(setup, 60, path, CHASH)
    return {
        "dataset": dataset,
        "setup": setup,
        "store": store,
        "final": final_model,
        "malicious": frozenset(malicious),
        "rounds": 60,
    }


@pytest.fixture(scope="session")
def logreg_backdoor_scenario(tmp_path_factory):
    """Logreg under a scaled backdoor, mini-batches, trimmed-mean."""
    dataset = gen_synthetic(3, 9, 80, 4.0, seed=33)
    spec = ModelSpec("logreg", 9, 3, l2=0.01)
    trigger = Trigger(kind="every_kth", k=3, value=1.0)
    attack = AttackConfig(kind="backdoor", trigger=trigger, target_label=0, lam=8.0, adaptive=True)
    malicious = (2, 5)
    setup = build_setup(
        spec=spec,
        dataset=dataset,
        n_clients=8,
        rule=AggregationRule("trimmed_mean", 2),
        eta=0.2,
        batch_size=24,
        seed=33,
        q=0.5,
        attack=attack,
        malicious=malicious,
    )
    path = tmp_path_factory.mktemp("backdoor") / "history.bin"
    store, final_model = train(setup, 50, path, CHASH)
    return {
        "dataset": dataset,
        "setup": setup,
        "store": store,
        "final": final_model,
        "malicious": frozenset(malicious),
        "rounds": 50,
    }
