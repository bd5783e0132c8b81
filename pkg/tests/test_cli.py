import struct

import numpy as np
import pytest

from evflow import (
    CameraGeometry,
    EncoderConfig,
    FlowMap,
    MlpWeights,
    generate_bases,
    save_weights,
    write_flow_map,
)
from evflow.cli import main, read_embeddings, read_predictions
from evflow.render import read_ppm

GEOM_FLAGS = ["--width", "64", "--height", "64"]
SMALL_ENC = ["--dim", "16", "--delta-x", "4", "--delta-y", "4", "--delta-t", "0.016"]


def write_csv(path, rows):
    path.write_text("".join(f"{t},{x},{y}\n" for t, x, y in rows))


def make_weights(path, embed_dim=16, b2=(1.0, 0.0), hidden=4):
    cfg = EncoderConfig(delta_t=0.016, embed_dim=embed_dim)
    bases = generate_bases(cfg)
    w = MlpWeights(
        w1=np.zeros((hidden, 2 * embed_dim), dtype=np.float32),
        b1=np.zeros(hidden, dtype=np.float32),
        w2=np.zeros((2, hidden), dtype=np.float32),
        b2=np.array(b2, dtype=np.float32),
        bases=bases,
    )
    save_weights(w, str(path))
    return w


class TestEncodeCommand:
    def test_single_event_all_queries(self, tmp_path, capsys):
        events = tmp_path / "ev.csv"
        write_csv(events, [(0.0, 3, 4)])
        out = tmp_path / "emb.vkme"
        code = main(["encode", "--events", str(events), "--out", str(out),
                     *GEOM_FLAGS, *SMALL_ENC])
        assert code == 0
        dim, slice_idx, event_idx, values = read_embeddings(str(out))
        assert dim == 16
        assert slice_idx.tolist() == [0] and event_idx.tolist() == [0]
        np.testing.assert_array_equal(values[0], np.ones(16, dtype=np.complex64))

    def test_empty_file_gives_header_only_output(self, tmp_path):
        events = tmp_path / "empty.csv"
        events.write_text("")
        out = tmp_path / "emb.vkme"
        code = main(["encode", "--events", str(events), "--out", str(out),
                     *GEOM_FLAGS, *SMALL_ENC])
        assert code == 0
        assert out.stat().st_size == 8  # magic + dim, zero records
        dim, slice_idx, _, _ = read_embeddings(str(out))
        assert dim == 16 and len(slice_idx) == 0

    def test_preset_resolves_recipe_parameters(self, tmp_path, capsys):
        events = tmp_path / "ev.csv"
        write_csv(events, [(0.0, 3, 4)])
        out = tmp_path / "emb.vkme"
        code = main(["encode", "--events", str(events), "--out", str(out),
                     "--preset", "640x480_32ms_C64_k8"])
        assert code == 0
        echoed = capsys.readouterr().out
        assert "delta_t=0.016" in echoed and "delta_x=8" in echoed and "dim=64" in echoed
        dim, _, _, _ = read_embeddings(str(out))
        assert dim == 64

    def test_preset_conflicts_with_explicit_settings(self, tmp_path):
        events = tmp_path / "ev.csv"
        write_csv(events, [(0.0, 3, 4)])
        code = main(["encode", "--events", str(events), "--out", str(tmp_path / "o"),
                     "--preset", "640x480_32ms_C64_k8", "--dim", "32"])
        assert code == 2

    def test_missing_events_file_is_io_error(self, tmp_path):
        code = main(["encode", "--events", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "o"), *GEOM_FLAGS, *SMALL_ENC])
        assert code == 1

    def test_query_policies(self, tmp_path):
        events = tmp_path / "ev.csv"
        write_csv(events, [(0.001 * i, i % 8, i % 8) for i in range(10)])
        out = tmp_path / "emb.vkme"
        code = main(["encode", "--events", str(events), "--out", str(out),
                     "--queries", "every:3", *GEOM_FLAGS, *SMALL_ENC])
        assert code == 0
        _, _, event_idx, _ = read_embeddings(str(out))
        assert event_idx.tolist() == [0, 3, 6, 9]

    def test_repeated_runs_are_byte_identical(self, tmp_path, rng):
        events = tmp_path / "ev.csv"
        write_csv(events, [(round(float(t), 6), int(x), int(y))
                           for t, x, y in zip(np.sort(rng.uniform(0, 0.03, 60)),
                                              rng.integers(0, 64, 60),
                                              rng.integers(0, 64, 60))])
        out_a, out_b = tmp_path / "a.vkme", tmp_path / "b.vkme"
        args = ["encode", "--events", str(events), "--queries", "random:20",
                *GEOM_FLAGS, *SMALL_ENC]
        assert main(args + ["--out", str(out_a)]) == 0
        assert main(args + ["--out", str(out_b)]) == 0
        assert out_a.read_bytes() == out_b.read_bytes()


class TestPredictCommand:
    def test_bias_only_head_gives_constant_rows(self, tmp_path):
        events = tmp_path / "ev.csv"
        write_csv(events, [(0.000, 3, 4), (0.001, 3, 5), (0.002, 4, 4)])
        weights = tmp_path / "head.vkmw"
        make_weights(weights, b2=(1.0, 0.0))
        out = tmp_path / "flows.csv"
        code = main(["predict", "--events", str(events), "--weights", str(weights),
                     "--out", str(out), *GEOM_FLAGS, *SMALL_ENC])
        assert code == 0
        body = [l for l in out.read_text().splitlines()
                if l and not l.startswith("#") and not l.startswith("slice_index")]
        assert len(body) == 3
        assert all(line.endswith(",1,0") for line in body)

    def test_dim_mismatch_exits_2(self, tmp_path, capsys):
        events = tmp_path / "ev.csv"
        write_csv(events, [(0.0, 3, 4)])
        weights = tmp_path / "head.vkmw"
        make_weights(weights, embed_dim=64)
        code = main(["predict", "--events", str(events), "--weights", str(weights),
                     "--out", str(tmp_path / "o"), *GEOM_FLAGS, *SMALL_ENC])
        assert code == 2
        err = capsys.readouterr().err
        assert "64" in err and "16" in err  # both values printed

    def test_prediction_csv_roundtrips(self, tmp_path):
        events = tmp_path / "ev.csv"
        write_csv(events, [(0.000, 3, 4), (0.010, 5, 6)])
        weights = tmp_path / "head.vkmw"
        make_weights(weights, b2=(2.0, -1.0))
        out = tmp_path / "flows.csv"
        assert main(["predict", "--events", str(events), "--weights", str(weights),
                     "--out", str(out), *GEOM_FLAGS, *SMALL_ENC]) == 0
        s, e, t, x, y, nx, ny = read_predictions(str(out))
        assert x.tolist() == [3, 5] and y.tolist() == [4, 6]
        np.testing.assert_allclose(nx, 2.0)
        np.testing.assert_allclose(ny, -1.0)


def make_gt(tmp_path, u=(3.0, 0.0), W=64, H=64, all_invalid=False):
    geom = CameraGeometry(W, H)
    flow = np.zeros((W, H, 2), dtype=np.float32)
    flow[:, :, 0], flow[:, :, 1] = u
    valid = np.zeros((W, H), dtype=bool) if all_invalid else np.ones((W, H), dtype=bool)
    path = tmp_path / "gt.flw"
    write_flow_map(FlowMap(flow=flow, valid=valid, geometry=geom), str(path))
    return path


def write_pred_csv(path, rows):
    lines = ["slice_index,event_index,t,x,y,nx,ny"]
    for r in rows:
        lines.append(",".join(str(v) for v in r))
    path.write_text("\n".join(lines) + "\n")


class TestEvalCommand:
    def test_analytic_projection_scene(self, tmp_path, capsys):
        gt = make_gt(tmp_path, u=(4.0, 3.0))
        rng = np.random.default_rng(0)
        rows = []
        for k in range(30):
            angle = rng.uniform(0.1, np.pi - 0.1)
            normal = np.array([np.cos(angle), np.sin(angle)])
            n = (np.array([4.0, 3.0]) @ normal) * normal
            rows.append((0, k, 0.001 * k, k % 64, (2 * k) % 64,
                         repr(float(n[0])), repr(float(n[1]))))
        pred = tmp_path / "pred.csv"
        write_pred_csv(pred, rows)
        out = tmp_path / "report.csv"
        code = main(["eval", "--pred", str(pred), "--gt", str(gt.resolve()),
                     "--out", str(out), *GEOM_FLAGS, *SMALL_ENC])
        assert code == 0
        printed = capsys.readouterr().out
        assert "pct_pos=100" in printed
        agg = [l for l in out.read_text().splitlines() if l.startswith("aggregate")][0]
        pee_value = float(agg.split(",")[1])
        assert pee_value < 1e-6

    def test_empty_valid_set_exits_3_with_count(self, tmp_path, capsys):
        gt = make_gt(tmp_path, all_invalid=True)
        pred = tmp_path / "pred.csv"
        write_pred_csv(pred, [(0, 0, 0.0, 1, 1, 1.0, 0.0), (0, 1, 0.0, 2, 2, 1.0, 0.0)])
        code = main(["eval", "--pred", str(pred), "--gt", str(gt),
                     "--out", str(tmp_path / "r.csv"), *GEOM_FLAGS, *SMALL_ENC])
        assert code == 3
        assert "2 predictions excluded" in capsys.readouterr().err

    def test_duplicated_rows_leave_metrics_unchanged(self, tmp_path, capsys):
        gt = make_gt(tmp_path, u=(2.0, 2.0))
        rows = [(0, 0, 0.0, 1, 1, 1.5, 0.5), (0, 1, 0.0, 2, 2, 0.5, 1.0)]
        pred_a = tmp_path / "a.csv"
        write_pred_csv(pred_a, rows)
        pred_b = tmp_path / "b.csv"
        write_pred_csv(pred_b, rows + rows)
        out_a, out_b = tmp_path / "ra.csv", tmp_path / "rb.csv"
        assert main(["eval", "--pred", str(pred_a), "--gt", str(gt), "--out", str(out_a),
                     *GEOM_FLAGS, *SMALL_ENC]) == 0
        assert main(["eval", "--pred", str(pred_b), "--gt", str(gt), "--out", str(out_b),
                     *GEOM_FLAGS, *SMALL_ENC]) == 0
        agg_a = [l for l in out_a.read_text().splitlines() if l.startswith("aggregate")][0]
        agg_b = [l for l in out_b.read_text().splitlines() if l.startswith("aggregate")][0]
        assert agg_a.split(",")[1:3] == agg_b.split(",")[1:3]

    def test_geometry_mismatch_exits_2(self, tmp_path):
        gt = make_gt(tmp_path, W=32, H=32)
        pred = tmp_path / "p.csv"
        write_pred_csv(pred, [(0, 0, 0.0, 1, 1, 1.0, 0.0)])
        code = main(["eval", "--pred", str(pred), "--gt", str(gt),
                     "--out", str(tmp_path / "r.csv"), *GEOM_FLAGS, *SMALL_ENC])
        assert code == 2


class TestBenchCommand:
    def test_tiny_workload_resolution_error(self, tmp_path):
        code = main(["bench", "--sizes", "64", "--out", str(tmp_path / "b.csv"),
                     *GEOM_FLAGS, *SMALL_ENC])
        assert code == 2

    def test_sweep_emits_csv_and_fit(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        code = main(["bench", "--sizes", "30000,100000,300000", "--n-queries", "1024",
                     "--min-wall", "1e-7", "--out", str(out), *GEOM_FLAGS, *SMALL_ENC])
        assert code == 0
        printed = capsys.readouterr().out
        assert "fit: event_cost=" in printed
        assert "pool per-flow ratio radius10/radius8" in printed
        lines = [l for l in out.read_text().splitlines() if not l.startswith("#")]
        assert lines[0] == "stage,count,wall_seconds,rate"
        assert sum(l.startswith("accumulate,") for l in lines) == 3


class TestRenderCommand:
    def render(self, tmp_path, rows, name="img.ppm"):
        pred = tmp_path / "pred.csv"
        write_pred_csv(pred, rows)
        out = tmp_path / name
        code = main(["render", "--pred", str(pred), "--out", str(out),
                     *GEOM_FLAGS, *SMALL_ENC])
        return code, out

    def test_uniform_flow_gives_one_color(self, tmp_path):
        rows = [(0, i, 0.0, i, i, 1.0, 0.0) for i in range(10)]
        code, out = self.render(tmp_path, rows)
        assert code == 0
        img = read_ppm(str(out))
        colored = img[img.sum(axis=2) > 0]
        assert len(np.unique(colored, axis=0)) == 1

    def test_opposite_flows_have_complementary_hues(self, tmp_path):
        rows = [(0, 0, 0.0, 1, 1, 5.0, 0.0), (0, 1, 0.0, 3, 3, -5.0, 0.0)]
        code, out = self.render(tmp_path, rows)
        img = read_ppm(str(out))
        a = img[1, 1].astype(int)  # row y=1, col x=1
        b = img[3, 3].astype(int)
        assert np.array_equal(a + b, [255, 255, 255])

    def test_magnitude_rescaling_leaves_image_unchanged(self, tmp_path):
        rows = [(0, 0, 0.0, 1, 1, 2.0, 1.0), (0, 1, 0.0, 5, 2, -1.0, 3.0)]
        _, out_a = self.render(tmp_path, rows, "a.ppm")
        doubled = [(s, e, t, x, y, 2 * nx, 2 * ny) for s, e, t, x, y, nx, ny in rows]
        _, out_b = self.render(tmp_path, doubled, "b.ppm")
        assert np.array_equal(read_ppm(str(out_a)), read_ppm(str(out_b)))

    def test_no_predictions_black_image_with_warning(self, tmp_path, capsys):
        code, out = self.render(tmp_path, [])
        assert code == 0
        assert "black" in capsys.readouterr().err
        img = read_ppm(str(out))
        assert not img.any()

    def test_sidecar_records_normalization(self, tmp_path):
        rows = [(0, 0, 0.0, 1, 1, 3.0, 4.0)]
        _, out = self.render(tmp_path, rows)
        sidecar = out.with_suffix(out.suffix + ".txt").read_text()
        assert "max_magnitude=5.0" in sidecar


class TestEndToEndPipeline:
    """Synthetic scene -> trained head -> predict -> eval -> render, all
    through the on-disk formats the CLI speaks."""

    def test_full_file_pipeline(self, tmp_path, capsys):
        from evflow import (EncoderConfig, EventStream, QuerySet, SceneParams,
                            synth_workload, train_head, write_events_binary,
                            write_flow_map, save_weights)
        from evflow.flow import TrainConfig
        from evflow.events import CameraGeometry

        geom = CameraGeometry(96, 96)
        cfg = EncoderConfig(delta_t=0.016, delta_x=8, delta_y=8, embed_dim=64,
                            precision="f32")

        def scene(seed):
            r = np.random.default_rng(seed)
            angle = r.uniform(0, 2 * np.pi)
            speed = r.uniform(40.0, 200.0)
            normal = np.array([-np.sin(angle), np.cos(angle)])
            params = SceneParams(seed=seed, window=cfg.window,
                                 velocity=tuple(speed * normal), edge_angle=angle)
            return synth_workload(1200, geom, "translating_edge", params)

        dataset = []
        for seed in range(80):
            sl, gt = scene(seed)
            q = QuerySet.random_m(len(sl), 50, seed=seed)
            dataset.append((sl, q, gt.flow[sl.x[q.indices], sl.y[q.indices]]))
        weights = train_head(dataset, cfg, TrainConfig(hidden=128, epochs=150,
                                                       batch_size=512,
                                                       learning_rate=2e-3, seed=0))
        weights_path = tmp_path / "head.vkmw"
        save_weights(weights, str(weights_path))

        held_out, gt_map = scene(500)
        events_path = tmp_path / "events.evn"
        write_events_binary(
            EventStream(t=held_out.t, x=held_out.x, y=held_out.y, geometry=geom),
            str(events_path),
        )
        gt_path = tmp_path / "gt.flw"
        write_flow_map(gt_map, str(gt_path))

        flags = ["--width", "96", "--height", "96", "--dim", "64",
                 "--delta-x", "8", "--delta-y", "8", "--delta-t", "0.016"]
        pred_path = tmp_path / "flows.csv"
        assert main(["predict", "--events", str(events_path), "--format", "binary",
                     "--weights", str(weights_path), "--out", str(pred_path),
                     "--queries", "every:4", *flags]) == 0

        report_path = tmp_path / "report.csv"
        assert main(["eval", "--pred", str(pred_path), "--gt", str(gt_path),
                     "--out", str(report_path), *flags]) == 0
        agg = [l for l in report_path.read_text().splitlines()
               if l.startswith("aggregate")][0]
        _, pee_s, pos_s, n_valid, _ = agg.split(",")
        assert int(n_valid) > 0
        assert float(pos_s) > 75.0  # trained head agrees with GT direction

        image_path = tmp_path / "flows.ppm"
        assert main(["render", "--pred", str(pred_path), "--out", str(image_path),
                     *flags]) == 0
        img = read_ppm(str(image_path))
        assert img.shape == (96, 96, 3) and img.any()


class TestConfigFile:
    def test_file_values_with_flag_override(self, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("dim=16\ndelta_x=4\ndelta_y=4\ndelta_t=0.016\n"
                          "width=64\nheight=64\n# comment\n")
        events = tmp_path / "ev.csv"
        write_csv(events, [(0.0, 3, 4)])
        out = tmp_path / "emb.vkme"
        code = main(["encode", "--config", str(config), "--events", str(events),
                     "--out", str(out)])
        assert code == 0
        dim, _, _, _ = read_embeddings(str(out))
        assert dim == 16
        # flag overrides the file value
        out2 = tmp_path / "emb2.vkme"
        code = main(["encode", "--config", str(config), "--events", str(events),
                     "--out", str(out2), "--dim", "8"])
        assert code == 0
        assert read_embeddings(str(out2))[0] == 8

    def test_unknown_key_rejected(self, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("flux_capacitor=1\n")
        code = main(["encode", "--config", str(config), "--events", "x",
                     "--out", str(tmp_path / "o")])
        assert code == 2
