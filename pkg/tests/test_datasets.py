import json

import numpy as np
import pytest

from aogdet.errors import FormatError, IoError
from aogdet.services.datasets import (DatasetManifest, ManifestEntry, build_combined_images,
                                      build_training_samples, latent_record, load_manifest, read_detections,
                                      save_manifest, write_detections, write_latent_sidecar)
from aogdet.services.inference import Detection, DetectionConfig, detect_multiclass

from conftest import SMALL_HOG, random_graph, random_image


def write_manifest(tmp_path, text):
    path = tmp_path / 'list.txt'
    path.write_text(text)
    return str(path)


class TestManifest:
    def test_parse(self, tmp_path):
        path = write_manifest(tmp_path, "# split test\n"
                                        "a.pgm car 0 0 10 10\n"
                                        "\n"
                                        "a.pgm bus 20 20 40 30\n"
                                        "# a comment\n"
                                        "b.pgm\n")
        manifest = load_manifest(path, check_files=False)
        assert manifest.split == 'test'
        assert [e.path for e in manifest.entries] == ['a.pgm', 'b.pgm']
        assert manifest.entries[0].annotations == [('car', (0.0, 0.0, 10.0, 10.0)), ('bus', (20.0, 20.0, 40.0, 30.0))]
        assert manifest.classes() == ['bus', 'car']
        assert manifest.groundtruth()['b.pgm'] == []
        assert manifest.resolve(manifest.entries[0]) == str(tmp_path / 'a.pgm')

    def test_degenerate_box(self, tmp_path):
        with pytest.raises(FormatError):
            load_manifest(write_manifest(tmp_path, "a.pgm car 10 0 10 5\n"), check_files=False)

    def test_wrong_field_count(self, tmp_path):
        with pytest.raises(FormatError):
            load_manifest(write_manifest(tmp_path, "a.pgm car 0 0 10\n"), check_files=False)

    def test_non_numeric_box(self, tmp_path):
        with pytest.raises(FormatError):
            load_manifest(write_manifest(tmp_path, "a.pgm car 0 0 ten 10\n"), check_files=False)

    def test_missing_image(self, tmp_path):
        with pytest.raises(IoError):
            load_manifest(write_manifest(tmp_path, "ghost.pgm car 0 0 10 10\n"))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IoError):
            load_manifest(str(tmp_path / 'none.txt'))

    def test_save_then_load(self, tmp_path):
        manifest = DatasetManifest(entries=[ManifestEntry('x.pgm', [('car', (1.0, 2.0, 30.5, 40.0))]),
                                            ManifestEntry('bg.pgm')], split='val')
        path = str(tmp_path / 'out' / 'val.txt')
        save_manifest(path, manifest)
        loaded = load_manifest(path, check_files=False)
        assert loaded.split == 'val'
        assert [(e.path, e.annotations) for e in loaded.entries] == [(e.path, e.annotations)
                                                                     for e in manifest.entries]


class TestSamples:
    def test_one_sample_per_object_or_background(self, tiny_corpus):
        manifest = load_manifest(tiny_corpus.train_path)
        samples = build_training_samples(manifest)
        n_objects = sum(len(e.annotations) for e in manifest.entries)
        n_backgrounds = sum(not e.annotations for e in manifest.entries)
        assert sum(s.is_positive for s in samples) == n_objects
        assert sum(not s.is_positive for s in samples) == n_backgrounds == 3
        assert all(s.image is not None for s in samples)

    def test_class_filter_keeps_backgrounds(self, tiny_corpus):
        samples = build_training_samples(load_manifest(tiny_corpus.train_path), classes=['class1'])
        assert {s.label for s in samples if s.is_positive} == {'class1'}
        assert sum(not s.is_positive for s in samples) == 3

    def test_combined_images_skip_backgrounds(self, tiny_corpus):
        images = build_combined_images(load_manifest(tiny_corpus.train_path))
        assert len(images) == 8
        assert all(image.objects for image in images)


class TestDetectionFiles:
    def test_write_then_read(self, tmp_path):
        detections = {'img_0001.pgm': [Detection('car', 1, (1.0, 2.0, 3.0, 4.0), 0.1234567, None),
                                       Detection('bus', 2, (5.0, 6.0, 70.0, 80.0), -2.0, None)]}
        path = str(tmp_path / 'dets.txt')
        write_detections(path, detections)
        assert read_detections(path) == {'img_0001.pgm': [('car', 0.123457, (1.0, 2.0, 3.0, 4.0)),
                                                          ('bus', -2.0, (5.0, 6.0, 70.0, 80.0))]}

    def test_bad_line(self, tmp_path):
        path = tmp_path / 'dets.txt'
        path.write_text("img car 0.5 0 0 10\n")
        with pytest.raises(FormatError):
            read_detections(str(path))

    def test_latent_sidecar(self, tmp_path, rng):
        graph = random_graph(rng, classes=('a', 'b'))
        config = DetectionConfig(hog=SMALL_HOG, search_radius=1, threshold=-np.inf)
        detections = detect_multiclass(graph, random_image(rng), config)
        records = [latent_record('img', d, graph) for d in detections]
        path = tmp_path / 'latent.jsonl'
        write_latent_sidecar(str(path), records)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(lines) == len(detections)
        for line, detection in zip(lines, detections):
            assert line['class'] == detection.class_name
            assert line['and_node'] == detection.and_node
            assert len(line['slots']) == 9
            assert line['root'][0] == detection.latent.root.level
