import io as _io
import json

import numpy as np
import pytest
from PIL import Image

from gcame import explain
from gcame.core import SaliencyMap
from gcame.io import (blend, colorize, contact_sheet, export_coco, load_coco, read_image,
                      read_saliency, render_overlay, write_image, write_saliency)
from gcame.toy import random_scene


def coco_doc(**extra):
    doc = {
        "images": [{"id": 1, "file_name": "a.png", "height": 40, "width": 50},
                   {"id": 2, "file_name": "b.png", "height": 40, "width": 50}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [1, 2, 10, 5]},
                        {"id": 2, "image_id": 1, "category_id": 7, "bbox": [20, 20, 5, 5]},
                        {"id": 3, "image_id": 2, "category_id": 3, "bbox": [0, 0, 50, 40]}],
        "categories": [{"id": 3, "name": "cat"}, {"id": 7, "name": "dog"}],
    }
    for k, v in extra.items():
        doc[k] = doc[k] + v
    return doc


class TestCoco:
    def test_sizes_and_conversion(self, tmp_path):
        p = tmp_path / "ann.json"
        p.write_text(json.dumps(coco_doc()))
        idx = load_coco(p)
        assert (len(idx.images), idx.num_annotations) == (2, 3)
        gt = idx.annotations[1][0]
        assert gt.box == (1, 2, 11, 7) and gt.class_index == 0
        assert idx.annotations[1][1].class_index == 1
        assert idx.class_names == ["cat", "dog"] and idx.skipped == 0

    def test_malformed_entries_skipped(self, tmp_path, caplog):
        bad = [{"id": 9, "image_id": 1, "category_id": 3, "bbox": [1, 1, 0, 5]},
               {"id": 10, "image_id": 5, "category_id": 3, "bbox": [1, 1, 2, 2]},
               {"id": 11, "image_id": 1, "category_id": 3, "bbox": [45, 1, 10, 5]},
               {"id": 12, "image_id": 1, "bbox": [1, 1, 2, 2]}]
        p = tmp_path / "ann.json"
        p.write_text(json.dumps(coco_doc(annotations=bad[:1])))
        assert load_coco(p).skipped == 1
        p.write_text(json.dumps(coco_doc(annotations=bad)))
        idx = load_coco(p)
        assert idx.skipped == 4 and idx.num_annotations == 3
        assert "skipping annotation" in caplog.text

    def test_unparsable_json_is_fatal(self, tmp_path):
        p = tmp_path / "ann.json"
        p.write_text("{not json")
        with pytest.raises(json.JSONDecodeError):
            load_coco(p)

    def test_missing_image_fails_on_access(self, tmp_path):
        p = tmp_path / "ann.json"
        p.write_text(json.dumps(coco_doc()))
        idx = load_coco(p, tmp_path / "nowhere")
        with pytest.raises(FileNotFoundError):
            idx.load_image(idx.images[0])

    def test_export_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        scenes = [random_scene(rng) for _ in range(5)]
        idx = load_coco(export_coco(scenes, tmp_path))
        assert idx.skipped == 0
        for rec, sc in zip(idx.images, scenes):
            gts = idx.annotations[rec.image_id]
            assert [g.box for g in gts] == [tuple(float(v) for v in b) for b in sc.boxes]
            assert [g.class_index for g in gts] == list(sc.labels)
            img = idx.load_image(rec)
            assert np.abs(img.pixels - sc.pixels).max() <= 0.5 / 255 + 1e-6


class TestSaliencyFiles:
    def test_bit_exact_round_trip(self, tmp_path, toy, square_scene, square_target):
        smap = explain(toy, square_scene.image, square_target)
        b1, j1 = write_saliency(smap, tmp_path / "one")
        back = read_saliency(tmp_path / "one")
        assert back.values.tobytes() == smap.values.tobytes()
        b2, j2 = write_saliency(back, tmp_path / "two")
        assert b1.read_bytes() == b2.read_bytes()
        assert j1.read_text() == j2.read_text()
        assert back.target.detection.box_index == square_target.detection.box_index

    def test_sidecar_fields(self, tmp_path, toy, square_scene, square_target):
        smap = explain(toy, square_scene.image, square_target)
        _, j = write_saliency(smap, tmp_path / "m.bin")
        doc = json.loads(j.read_text())
        assert doc["shape"] == [128, 128] and doc["dtype"] == "float32"
        assert doc["layer_ids"] == ["head.cls_conv"] and "runtime_s" not in doc["meta"]
        assert len(doc["sigmas"][0]) > 0
        raw = (tmp_path / "m.bin").read_bytes()
        assert len(raw) == 128 * 128 * 4

    def test_image_files(self, tmp_path, square_scene):
        write_image(square_scene.pixels, tmp_path / "x.png")
        img = read_image(tmp_path / "x.png")
        assert img.shape == (128, 128)


@pytest.fixture(scope="module")
def scene_map(toy, square_scene, square_target):
    return explain(toy, square_scene.image, square_target)


class TestRender:
    def test_deterministic_bytes(self, square_scene, square_target, scene_map):
        a = render_overlay(square_scene.image, scene_map, square_target.detection)
        b = render_overlay(square_scene.image, scene_map, square_target.detection)
        assert a == b and a[:8] == b"\x89PNG\r\n\x1a\n"

    def test_zero_map_is_image_plus_outline(self, square_scene, square_target):
        det = square_target.detection
        png = render_overlay(square_scene.image, SaliencyMap(np.zeros((128, 128))), det)
        out = np.asarray(Image.open(_io.BytesIO(png)))
        ref = np.round(square_scene.pixels * 255).astype(np.uint8)
        x1, y1, x2, y2 = (int(v) for v in det.box)
        changed = np.any(out != ref, axis=2)
        # only the rectangle outline and the label above it differ
        inner = np.zeros_like(changed)
        inner[y1 + 1:y2 - 2, x1 + 1:x2 - 2] = True
        assert changed.any() and not changed[inner].any()
        assert not changed[y2 + 1:].any()
        assert np.all(out[changed] == 255)

    def test_peak_gets_top_color(self, square_scene):
        v = np.zeros((128, 128))
        v[10, 20] = 1.0
        out = np.asarray(Image.open(_io.BytesIO(render_overlay(square_scene.image, v))))
        top = colorize(np.array([1.0]))[0]
        base = np.round(square_scene.pixels[10, 20] * 255)
        expected = np.round(0.5 * base + 0.5 * top)
        assert np.array_equal(out[10, 20], expected.astype(np.uint8))
        assert np.array_equal(blend(square_scene.pixels, v)[10, 20], out[10, 20])

    def test_shape_mismatch(self, square_scene):
        with pytest.raises(ValueError):
            render_overlay(square_scene.image, np.zeros((64, 64)))

    def test_contact_sheet(self, square_scene):
        png = render_overlay(square_scene.image, np.zeros((128, 128)))
        sheet = Image.open(_io.BytesIO(contact_sheet([("a", png), ("b", png), ("c", png)], 2)))
        assert sheet.size == (256, 2 * (128 + 14))
        with pytest.raises(ValueError):
            contact_sheet([])
