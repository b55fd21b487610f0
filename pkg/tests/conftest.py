import json

import pytest

from stylerank.cli import main
from stylerank.dataset import save_manifest
from stylerank.synthetic import make_datasets


class CliRun:
    def __init__(self, code, out, err):
        self.code, self.out, self.err = code, out, err

    @property
    def json(self):
        return json.loads(self.out)


@pytest.fixture
def run_cli(capsys):
    def run(*argv):
        capsys.readouterr()
        code = main([str(a) for a in argv])
        out, err = capsys.readouterr()
        return CliRun(code, out, err)

    return run


def _call(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Small synthetic catalog with two trained 16x16 extractors, features and index."""
    root = tmp_path_factory.mktemp("cli")
    for task, ds in make_datasets(48, seed=3, size=16).items():
        save_manifest(ds, root / f"{task}.csv", root / "images", "png")
    common = ["--image-size", 16, "--epochs", 2, "--batch", 8, "--seed", 1]
    _call("train", "--manifest", root / "shape.csv", "--out", root / "shape.ckpt", *common)
    _call("train", "--manifest", root / "texture.csv", "--out", root / "texture.ckpt", "--augment", "texture", *common)
    ckpts = ["--checkpoint", root / "shape.ckpt", "--checkpoint", root / "texture.ckpt"]
    _call("extract", *ckpts, "--manifest", root / "shape.csv", "--out", root / "f.fmx")
    _call("index", "--fmx", root / "f.fmx", "--out", root / "f.btx")
    return root
