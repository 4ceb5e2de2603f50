import json

import numpy as np
import pytest

from gcame.cli import build_parser, compare_table, main, resolve_config
from gcame.io import export_coco, read_saliency, write_image
from gcame.toy import compose_scene, random_scene, tiny_pair_scene


@pytest.fixture(scope="module")
def square_png(tmp_path_factory):
    path = tmp_path_factory.mktemp("img") / "square.png"
    write_image(compose_scene([(1, 52, 52, 24)], rng=np.random.default_rng(3)).pixels, path)
    return path


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    rng = np.random.default_rng(21)
    scenes = [random_scene(rng) for _ in range(4)] + [tiny_pair_scene(rng) for _ in range(2)]
    return export_coco(scenes, tmp_path_factory.mktemp("data"))


def files(root, pattern):
    return sorted(p.name for p in root.glob(pattern))


class TestExplain:
    def test_one_binary_one_png(self, tmp_path, square_png):
        code = main(["explain", "--model", "toy", "--image", str(square_png), "--method", "gcame",
                     "--output-dir", str(tmp_path)])
        assert code == 0
        assert files(tmp_path / "saliency", "*.bin") == ["square_gcame_0.bin"]
        assert files(tmp_path / "overlays", "*.png") == ["square_gcame_0.png"]
        smap = read_saliency(tmp_path / "saliency" / "square_gcame_0")
        assert smap.shape == (128, 128)

    def test_identical_runs_are_bit_identical(self, tmp_path, square_png):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["explain", "--image", str(square_png), "--method", "drise",
                         "--num-masks", "200", "--seed", "5", "--output-dir", str(out)]) == 0
            outs.append(out)
        for sub in ("saliency/square_drise_0.bin", "saliency/square_drise_0.json",
                    "overlays/square_drise_0.png"):
            assert (outs[0] / sub).read_bytes() == (outs[1] / sub).read_bytes()

    def test_all_boxes(self, tmp_path):
        img = tmp_path / "two.png"
        write_image(compose_scene([(0, 10, 10, 24), (1, 80, 80, 24)],
                                  rng=np.random.default_rng(4)).pixels, img)
        assert main(["explain", "--image", str(img), "--all", "--output-dir", str(tmp_path)]) == 0
        assert len(files(tmp_path / "saliency", "*.bin")) == 2


class TestEvaluate:
    def test_tiny_only_report(self, tmp_path, toy_dataset):
        code = main(["evaluate", "--annotations", str(toy_dataset), "--metrics", "pg,ebpg",
                     "--tiny-only", "--methods", "gcame", "--output-dir", str(tmp_path)])
        assert code == 0
        doc = json.loads((tmp_path / "reports" / "report.json").read_text())
        g = doc["methods"]["gcame"]
        assert g["overall"] is None and g["tiny"]["n"] > 0
        assert 0 <= g["tiny"]["pg"] <= 1 and 0 <= g["tiny"]["ebpg"] <= 1
        assert doc["meta"]["tiny_only"] is True

    def test_workers_do_not_change_results(self, tmp_path, toy_dataset):
        reports = []
        for w in (1, 3):
            out = tmp_path / f"w{w}"
            assert main(["evaluate", "--annotations", str(toy_dataset), "--methods", "gcame",
                         "--metrics", "pg,ebpg,confidence_drop,information_drop",
                         "--workers", str(w), "--output-dir", str(out)]) == 0
            reports.append((out / "reports" / "records.csv").read_text())
        strip = [[",".join(l.split(",")[:-2]) for l in r.splitlines()] for r in reports]
        assert strip[0] == strip[1]

    def test_empty_metric_list_is_usage_error(self, tmp_path, toy_dataset, capsys):
        assert main(["evaluate", "--annotations", str(toy_dataset), "--metrics", "",
                     "--output-dir", str(tmp_path)]) == 1
        assert "metric" in capsys.readouterr().err


class TestSanityAndCompare:
    def test_sanity_outputs(self, tmp_path, square_png):
        code = main(["sanity", "--image", str(square_png), "--layers", "head.cls_pred,backbone.dark5",
                     "--output-dir", str(tmp_path)])
        assert code == 0
        doc = json.loads((tmp_path / "reports" / "sanity.json").read_text())
        assert doc["results"][0]["rank_correlation"] == 1.0
        assert (tmp_path / "reports" / "sanity_sheet.png").exists()

    def test_compare_timing(self, tmp_path, square_png, capsys):
        code = main(["compare", "--image", str(square_png), "--num-masks", "1000",
                     "--methods", "gcame,gradcam,drise", "--output-dir", str(tmp_path)])
        assert code == 0
        doc = json.loads((tmp_path / "reports" / "compare.json").read_text())
        m = doc["methods"]
        assert m["gcame"]["runtime_s"] < m["drise"]["runtime_s"]
        assert "| Running time (s) |" in capsys.readouterr().out

    def test_table_layout(self):
        table = compare_table({"drise": {"pg": 0.5}, "gcame": {"pg": 1.0}})
        lines = table.splitlines()
        assert lines[0] == "| Metric | drise | gcame |"
        assert lines[2] == "| PG | 0.500 | 1.000 |"
        assert lines[3] == "| EBPG | - | - |"


class TestConfiguration:
    def parse(self, argv):
        return build_parser().parse_args(argv)

    def test_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "num_masks": 10, "std": 0.2}))
        args = self.parse(["--config", str(cfg), "explain", "--image", "x.png", "--seed", "3"])
        rc = resolve_config(args, {"GCAME_SEED": "2", "GCAME_NUM_MASKS": "20"})
        assert (rc.seed, rc.num_masks, rc.std) == (3, 20, 0.2)

    def test_unknown_flag_exit_1(self, capsys):
        assert main(["explain", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_command_and_image(self):
        assert main([]) == 1
        assert main(["explain"]) == 1
        assert main(["explain", "--image", "x.png", "--method", "lime"]) == 1

    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"colour": "red"}))
        assert main(["--config", str(cfg), "explain", "--image", "x.png"]) == 1

    def test_runtime_failure_exit_2(self, tmp_path):
        assert main(["explain", "--image", str(tmp_path / "missing.png")]) == 2
