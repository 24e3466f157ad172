"""Testes para o modelo GNN + transformer."""
import os
import tempfile
import unittest

import numpy as np

from config import load_config
from flowgraph import Dataset, GraphSample, SnapshotFrame, assemble_windows, encode_frames
from model import (
    POSITIONAL_TABLE,
    CheckpointError,
    EncodedSeries,
    ModelConfig,
    ModelParams,
    embed_snapshot,
    forward,
    forward_batch,
    init_params,
    load_checkpoint,
    param_group,
    parameter_shapes,
    predict_series,
    predict_values,
    save_checkpoint,
)
from neural import AdamState, Tape, adam_step, grad_check, save_archive
from prng import XorShift64Star
from procsim import process_layout

TINY = ModelConfig(
    hidden_dim=8, mp_rounds=2, embed_dim=8, tf_layers=1, tf_heads=2,
    tf_model_dim=8, tf_ff_dim=16, lookback=3, head_hidden=8,
)


def random_frames(topology, n, seed=0):
    rng = XorShift64Star(seed)
    return tuple(
        SnapshotFrame(
            time=36.0 * i,
            readings={sid: rng.uniform(-1.0, 1.0) for sid in topology.input_slots},
            target=rng.uniform(),
        )
        for i in range(n)
    )


class TestModelConfig(unittest.TestCase):
    """Testes para ModelConfig e a tabela de parâmetros."""

    def test_heads_must_divide_width(self):
        """Testa tf_model_dim não divisível por tf_heads."""
        with self.assertRaises(ValueError):
            ModelConfig(tf_model_dim=10, tf_heads=4)
        with self.assertRaises(ValueError):
            ModelConfig(lookback=0)

    def test_from_config(self):
        """Testa leitura das chaves MODEL_*."""
        cfg = ModelConfig.from_config(load_config(overrides={"MODEL_HIDDEN_DIM": "32"}))
        self.assertEqual(cfg.hidden_dim, 32)
        self.assertEqual(cfg.lookback, 5)

    def test_shapes_do_not_depend_on_topology(self):
        """Testa que nenhuma forma depende do número de nós ou arestas."""
        shapes = parameter_shapes(TINY)
        self.assertEqual(shapes["gnn.input.w"], (22, 8))
        self.assertEqual(shapes["gnn.message.0.w1"], (2 * 8 + 14, 8))
        self.assertEqual(shapes[POSITIONAL_TABLE], (3, 8))
        self.assertEqual(shapes["head.w3"], (8, 1))

    def test_param_groups(self):
        """Testa a classificação dos parâmetros em grupos."""
        self.assertEqual(param_group("gnn.message.1.w2"), "gnn.message")
        self.assertEqual(param_group("gnn.readout.b"), "gnn.readout")
        self.assertEqual(param_group("temporal.layer.0.attn.wq"), "temporal")
        self.assertEqual(param_group("head.b3"), "head")

    def test_trainable_names(self):
        """Testa que a tabela posicional e os grupos congelados ficam de fora."""
        params = init_params(TINY, 0)
        names = params.trainable_names(("gnn.message", "gnn.update"))
        self.assertNotIn(POSITIONAL_TABLE, names)
        self.assertFalse(any(n.startswith("gnn.message") or n.startswith("gnn.update") for n in names))
        self.assertIn("gnn.input.w", names)
        self.assertIn("head.w1", names)

    def test_init_is_deterministic(self):
        """Testa mesma semente, mesmos pesos; semente diferente, pesos diferentes."""
        self.assertTrue(init_params(TINY, 4).equals(init_params(TINY, 4)))
        self.assertFalse(init_params(TINY, 4).equals(init_params(TINY, 5), ["gnn.input.w"]))


class TestEmbedding(unittest.TestCase):
    """Testes para o embedding do fluxograma."""

    def setUp(self):
        self.topology = process_layout("A").topology
        self.params = init_params(TINY, 1)

    def _embed(self, topology, frame, params=None):
        nodes, edges = encode_frames(topology, [frame])
        return embed_snapshot(TINY, params or self.params, nodes[0], edges[0], topology.edge_endpoints)

    def test_zero_params_zero_embedding(self):
        """Testa parâmetros zerados -> embedding zero."""
        frame = random_frames(self.topology, 1)[0]
        np.testing.assert_array_equal(self._embed(self.topology, frame, ModelParams.zeros(TINY)), np.zeros(8))

    def test_node_permutation_invariance(self):
        """Testa 20 permutações dos nós do processo A -> mesmo embedding."""
        frame = random_frames(self.topology, 1, seed=2)[0]
        reference = self._embed(self.topology, frame)
        rng = XorShift64Star(11)
        ids = [n.node_id for n in self.topology.nodes]
        for _ in range(20):
            order = [ids[i] for i in rng.permutation(len(ids))]
            permuted = self.topology.reorder_nodes(order)
            np.testing.assert_allclose(self._embed(permuted, frame), reference, rtol=0, atol=1e-9)

    def test_single_node_without_edges(self):
        """Testa nó isolado: mensagens zero, só o caminho de atualização do próprio nó."""
        node = np.zeros(22)
        node[5] = 1.0
        node[9] = 0.3
        p = self.params
        h = node @ p["gnn.input.w"] + p["gnn.input.b"]
        for k in range(TINY.mp_rounds):
            z = np.concatenate([h, np.zeros(8)])
            hidden = np.tanh(z @ p[f"gnn.update.{k}.w1"] + p[f"gnn.update.{k}.b1"])
            h = h + hidden @ p[f"gnn.update.{k}.w2"] + p[f"gnn.update.{k}.b2"]
        expected = h @ p["gnn.readout.w"] + p["gnn.readout.b"]
        got = embed_snapshot(TINY, p, node[None, :], np.zeros((0, 14)), ([], []))
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_bad_edge_index(self):
        """Testa índice de aresta fora do intervalo."""
        with self.assertRaises(ValueError):
            embed_snapshot(TINY, self.params, np.zeros((2, 22)), np.zeros((1, 14)), ([0], [5]))


class TestForward(unittest.TestCase):
    """Testes para forward, predict_series e a verificação de gradiente."""

    def setUp(self):
        self.topology = process_layout("A").topology
        self.params = init_params(TINY, 2)
        self.frames = random_frames(self.topology, 8, seed=3)

    def test_zero_params_zero_output(self):
        """Testa parâmetros zerados -> ŷ = 0."""
        sample = GraphSample(self.topology, self.frames[:3], self.frames[2].target)
        self.assertEqual(forward(TINY, ModelParams.zeros(TINY), sample), 0.0)

    def test_deterministic(self):
        """Testa duas chamadas com a mesma entrada -> saídas idênticas."""
        sample = GraphSample(self.topology, self.frames[:3], self.frames[2].target)
        self.assertEqual(forward(TINY, self.params, sample), forward(TINY, self.params, sample))

    def test_frame_order_irrelevant_without_positional(self):
        """Testa que, sem codificação posicional, a ordem dos frames não muda ŷ."""
        params = self.params.with_positional(np.zeros((3, 8)))
        a, b, c = self.frames[:3]
        original = GraphSample(self.topology, (a, b, c), c.target)
        shuffled = GraphSample(
            self.topology,
            (
                SnapshotFrame(a.time, c.readings, c.target),
                SnapshotFrame(b.time, a.readings, a.target),
                SnapshotFrame(c.time, b.readings, b.target),
            ),
            b.target,
        )
        self.assertAlmostEqual(forward(TINY, params, original), forward(TINY, params, shuffled), places=12)

    def test_wrong_window_length(self):
        """Testa janela com tamanho diferente de L."""
        with self.assertRaises(ValueError):
            forward(TINY, self.params, GraphSample(self.topology, self.frames[:2], 0.0))

    def test_predict_series_matches_forward(self):
        """Testa N-L+1 predições iguais a forward sobre assemble_windows."""
        dataset = Dataset(self.topology, self.frames)
        series = EncodedSeries.from_frames(self.topology, self.frames)
        predictions = predict_series(TINY, self.params, series)
        windows = assemble_windows(dataset, TINY.lookback)
        self.assertEqual(len(predictions), 8 - 3 + 1)
        for (t, y_hat), sample in zip(predictions, windows):
            self.assertEqual(t, sample.frames[-1].time)
            self.assertAlmostEqual(y_hat, forward(TINY, self.params, sample), places=10)

    def test_split_of_exactly_lookback(self):
        """Testa série com exatamente L frames -> 1 predição; menos que L -> erro."""
        series = EncodedSeries.from_frames(self.topology, self.frames[:3])
        self.assertEqual(len(predict_series(TINY, self.params, series)), 1)
        with self.assertRaises(ValueError):
            predict_series(TINY, self.params, series.head(2))

    def test_same_params_run_on_other_topology(self):
        """Testa que os parâmetros treinados para A predizem em B sem adaptação."""
        topology_b = process_layout("B").topology
        series_b = EncodedSeries.from_frames(topology_b, random_frames(topology_b, 6, seed=4))
        values = predict_values(TINY, self.params, series_b)
        self.assertEqual(values.shape, (4,))
        self.assertTrue(np.all(np.isfinite(values)))

    def test_full_model_gradient(self):
        """Testa gradiente do modelo completo em 100 coordenadas aleatórias."""
        series = EncodedSeries.from_frames(self.topology, self.frames)
        batch = series.batch(series.window_ends(TINY.lookback)[:3], TINY.lookback)

        def loss(tape, p):
            return tape.mse(forward_batch(tape, TINY, p, batch), batch.targets)

        self.assertLess(grad_check(loss, self.params.tensors, n_probes=100, seed=7), 1e-4)

    def test_small_adam_step_reduces_loss(self):
        """Testa que um passo do Adam com lr=1e-6 reduz a perda de uma janela."""
        series = EncodedSeries.from_frames(self.topology, self.frames)
        batch = series.batch(series.window_ends(TINY.lookback)[:1], TINY.lookback)

        def window_loss(tensors, trainable=()):
            tape = Tape()
            p = tape.watch(tensors, trainable=trainable)
            return tape, p, tape.mse(forward_batch(tape, TINY, p, batch), batch.targets)

        tape, p, loss = window_loss(self.params.tensors, self.params.trainable_names())
        grads = tape.gradient(loss, p)
        updated, _ = adam_step(dict(self.params.tensors), grads, AdamState.for_params(grads, learning_rate=1e-6))
        _, _, new_loss = window_loss(updated)
        self.assertLess(new_loss.item(), loss.item())


class TestCheckpoint(unittest.TestCase):
    """Testes para salvar e carregar checkpoints."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.ntar")

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_and_load(self):
        """Testa que config, tensores, escala e metadados voltam intactos."""
        params = init_params(TINY, 9)
        save_checkpoint(self.path, TINY, params, {"mean": 0.9, "std": 0.01}, {"seed": 9})
        checkpoint = load_checkpoint(self.path)
        self.assertEqual(checkpoint.config, TINY)
        self.assertTrue(checkpoint.params.equals(params))
        self.assertEqual(checkpoint.params.names, list(parameter_shapes(TINY)))
        self.assertEqual(checkpoint.target_scaler, {"mean": 0.9, "std": 0.01})
        self.assertEqual(checkpoint.meta, {"seed": 9})

    def test_missing_tensor(self):
        """Testa checkpoint sem um dos tensores esperados."""
        params = dict(init_params(TINY, 0).tensors)
        del params["head.b3"]
        save_checkpoint(self.path, TINY, ModelParams(params))
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_not_a_checkpoint(self):
        """Testa arquivo NTAR de outro formato e arquivo inexistente."""
        save_archive(self.path, {"w": np.ones(2)}, {"format": "other"})
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.tmp.name, "missing.ntar"))


if __name__ == "__main__":
    unittest.main()
