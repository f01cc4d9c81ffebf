import csv

import numpy as np
import pytest

from hsiadv.cli import main
from hsiadv.config import dump_config, load_config


TINY = [
    "dataset.classes=3", "dataset.bands=6", "dataset.height=24", "dataset.width=24",
    "dataset.patch_size=8", "dataset.max_per_class=12", "dataset.train_fraction=0.6",
    "models.epochs=4", "models.targets=cnn-b",
    "attack.methods=fgsm,mi-fgsm", "attack.epsilons=0.03",
    "attack.iterations=2", "attack.copies=2",
    "defense.filter_window=3",
    "run.seed=11", "run.workers=2",
]


def run(tmp_path, command, extra=()):
    args = [command, "-o", str(tmp_path)]
    for s in (*TINY, *extra):
        args += ["--set", s]
    return main(args)


class TestConfig:
    def test_defaults_roundtrip_through_ini(self, tmp_path):
        cfg = load_config(None, ["run.seed=5", "attack.eta=0.2"])
        ini = tmp_path / "c.ini"
        ini.write_text(dump_config(cfg))
        cfg2 = load_config(ini)
        assert cfg2.seed == 5
        assert cfg2.attack.eta == 0.2
        assert cfg2.attack.methods == cfg.attack.methods

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            load_config(None, ["attack.strength=11"])

    def test_bad_override_format_rejected(self):
        with pytest.raises(ValueError):
            load_config(None, ["no-dots"])

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.ini")

    def test_derived_objects(self):
        cfg = load_config(None, ["transforms.kinds=vflip,hflip", "models.tap=2"])
        assert cfg.registry().kinds == ("vflip", "hflip")
        assert cfg.loss_config().tap == 2
        ac = cfg.attack_config("ours-mi-fgsm", 0.01)
        assert ac.epsilon == 0.01 and ac.method == "ours-mi-fgsm"


class TestPipeline:
    def test_synth_train_attack_eval_report(self, tmp_path, capsys):
        assert run(tmp_path, "synth") == 0
        assert (tmp_path / "scene.hsc").exists()
        assert (tmp_path / "scene.hsl").exists()

        assert run(tmp_path, "train") == 0
        assert (tmp_path / "models" / "cnn-a.hsm").exists()
        assert (tmp_path / "models" / "cnn-b.hsm").exists()
        acc_rows = list(csv.DictReader(open(tmp_path / "models" / "clean_accuracy.csv")))
        assert [r["model"] for r in acc_rows] == ["cnn-a", "cnn-b"]

        assert run(tmp_path, "attack") == 0
        adv_dir = tmp_path / "adv" / "fgsm_eps0.03"
        assert adv_dir.exists() and (adv_dir / "trace.csv").exists()
        manifest = list(csv.DictReader(open(adv_dir / "manifest.csv")))
        assert (adv_dir / f"patch_{len(manifest) - 1:05d}.hsc").exists()

        assert run(tmp_path, "eval") == 0
        report = list(csv.DictReader(open(tmp_path / "report.csv")))
        # one row per (method incl clean none) x model x eps x defense
        methods = {r["method"] for r in report}
        assert methods == {"none", "fgsm", "mi-fgsm"}
        assert {r["defense"] for r in report} == {"none", "noise", "filter"}
        n_expected = (1 + 2) * 2 * 1 * 3
        assert len(report) == n_expected

        # clean rows match cmd_train accuracies
        clean = {r["model"]: float(r["OA"]) for r in report
                 if r["method"] == "none" and r["defense"] == "none"}
        trained = {r["model"]: float(r["clean_oa"]) for r in acc_rows}
        for arch, oa in clean.items():
            assert abs(oa - trained[arch]) < 1e-6

        capsys.readouterr()
        assert run(tmp_path, "report") == 0
        out = capsys.readouterr().out
        assert "method" in out and "Kappa" in out

    def test_synth_deterministic(self, tmp_path):
        run(tmp_path / "a", "synth")
        run(tmp_path / "b", "synth")
        assert (tmp_path / "a" / "scene.hsc").read_bytes() == (tmp_path / "b" / "scene.hsc").read_bytes()
        assert (tmp_path / "a" / "scene.hsl").read_bytes() == (tmp_path / "b" / "scene.hsl").read_bytes()

    def test_attack_rerun_overwrites_identically(self, tmp_path):
        run(tmp_path, "synth")
        run(tmp_path, "train")
        run(tmp_path, "attack")
        first = (tmp_path / "adv" / "mi-fgsm_eps0.03" / "patch_00000.hsc").read_bytes()
        run(tmp_path, "attack")
        second = (tmp_path / "adv" / "mi-fgsm_eps0.03" / "patch_00000.hsc").read_bytes()
        assert first == second

    def test_single_class_rejected(self, tmp_path, capsys):
        code = run(tmp_path, "synth", extra=["dataset.classes=1"])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_missing_dataset_clear_error(self, tmp_path, capsys):
        code = run(tmp_path, "train")
        assert code == 1
        err = capsys.readouterr().err
        assert "synth" in err

    def test_print_config(self, tmp_path, capsys):
        assert main(["synth", "--print-config", "--set", "run.seed=9"]) == 0
        out = capsys.readouterr().out
        assert "[dataset]" in out and "seed = 9" in out
