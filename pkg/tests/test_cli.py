"""Experiment runner: subcommands, exit codes, files, determinism."""

import json
import os

import numpy as np
import pytest

from pmtrans import cli
from pmtrans import config as C
from pmtrans import data as D
from pmtrans.config import ConfigError
from pmtrans.tensor import NumericError

BASE_CFG = """\
seed = 3
image_size = 16
patch_size = 4
n_layers = 1
n_heads = 2
embed_dim = 16
n_classes = 3
epochs = 2
warmup_epochs = 1
batch_size = 16
n_per_domain = 60
shift_gradient = 0.3
shift_noise = 0.08
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One generated pair plus one trained run, shared by the read-only
    assertions below."""
    root = tmp_path_factory.mktemp("cliruns")
    cfg_path = root / "run.cfg"
    cfg_path.write_text(BASE_CFG + f"output_dir = {root / 'out'}\n")
    assert cli.main(["generate", "--config", str(cfg_path)]) == 0
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    return root


def _read_records(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


# ------------------------------------------------------------ arm parsing


def test_parse_arm_with_and_without_overrides():
    assert cli.parse_arm("full:") == ("full", {})
    name, ov = cli.parse_arm("ablated: mix_mode=none, use_lf=false")
    assert name == "ablated"
    assert ov == {"mix_mode": "none", "use_lf": "false"}


@pytest.mark.parametrize("spec", [
    "noname", ": mix_mode=none", "x: mix_mode", "x: =3",
    "x: a=1, a=2",
])
def test_parse_arm_rejects_malformed(spec):
    with pytest.raises(ConfigError):
        cli.parse_arm(spec)


def test_summary_csv_keeps_declaration_order():
    arms = [("b", {}), ("a", {})]
    table = cli.summary_csv(arms, {"a": 0.5, "b": "failed"})
    assert table == "b,a\nfailed,0.5000\n"


# ------------------------------------------------------------- generate


def test_generate_is_deterministic_and_digest_matches(workdir, capsys):
    out = workdir / "out"
    first = (out / "source.pmds").read_bytes()
    cfg_path = workdir / "run.cfg"
    assert cli.main(["generate", "--config", str(cfg_path)]) == 0
    assert (out / "source.pmds").read_bytes() == first
    printed = capsys.readouterr().out
    assert D.file_digest(str(out / "source.pmds")) in printed


def test_generate_invalid_class_count_exits_config(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("seed = 1\nn_classes = 8\nembed_dim = 8\n")
    assert cli.main(["generate", "--config", str(p)]) == 1


# ----------------------------------------------------------------- train


def test_train_outputs_and_record_count(workdir):
    out = workdir / "out"
    records = _read_records(out / "metrics.jsonl")
    # one eval record plus one per warmup and adaptation epoch
    assert len(records) == 1 + 1 + 2
    assert [r["epoch"] for r in records] == [0, 1, 2, 3]
    assert (out / "model.ckpt").is_file()
    sidecar = (out / "config.resolved").read_text()
    assert sidecar.startswith("# digest: ")
    cfg = C.from_text(sidecar)
    assert sidecar.splitlines()[0].split()[-1] == C.config_digest(cfg)
    # deterministic timing keeps metric files reproducible
    assert all(r["wall_ms"] == 0.0 for r in records)


def test_train_rerun_is_byte_identical(workdir):
    out = workdir / "out"
    before = (out / "metrics.jsonl").read_bytes()
    assert cli.main(["train", "--config", str(workdir / "run.cfg")]) == 0
    assert (out / "metrics.jsonl").read_bytes() == before


def test_train_zero_epochs_single_record(workdir, tmp_path):
    cfg_path = tmp_path / "zero.cfg"
    src = workdir / "out" / "source.pmds"
    tgt = workdir / "out" / "target.pmds"
    cfg_path.write_text(
        BASE_CFG.replace("epochs = 2", "epochs = 0")
                .replace("warmup_epochs = 1", "warmup_epochs = 0")
        + f"source_path = {src}\ntarget_path = {tgt}\n"
        + f"output_dir = {tmp_path / 'out0'}\n")
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    records = _read_records(tmp_path / "out0" / "metrics.jsonl")
    assert len(records) == 1
    assert records[0]["epoch"] == 0


def test_train_mode_none_keeps_transfer_terms_zero(workdir, tmp_path):
    cfg_path = tmp_path / "none.cfg"
    src = workdir / "out" / "source.pmds"
    tgt = workdir / "out" / "target.pmds"
    cfg_path.write_text(
        BASE_CFG + f"mix_mode = none\nsource_path = {src}\n"
        f"target_path = {tgt}\noutput_dir = {tmp_path / 'outn'}\n")
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    records = _read_records(tmp_path / "outn" / "metrics.jsonl")
    for rec in records[1:]:
        assert rec["ce_total"] == 0.0
        assert rec["l_l_is"] == 0.0 and rec["l_f_it"] == 0.0
    assert all(rec["pseudo_acc"] is None for rec in records)


def test_train_missing_dataset_exits_data(tmp_path):
    cfg_path = tmp_path / "nodata.cfg"
    cfg_path.write_text("seed = 1\nsource_path = nope.pmds\n"
                        "target_path = nope2.pmds\n")
    assert cli.main(["train", "--config", str(cfg_path)]) == 2


# ------------------------------------------------------------ exit codes


def test_missing_config_file_exits_config():
    assert cli.main(["train", "--config", "/definitely/absent.cfg"]) == 1


def test_bad_flag_exits_config(capsys):
    assert cli.main(["train", "--confg", "x"]) == 1
    assert "error" in capsys.readouterr().err


def test_numeric_error_maps_to_exit_3(tmp_path, monkeypatch):
    cfg_path = tmp_path / "c.cfg"
    cfg_path.write_text("seed = 1\n")

    def boom(cfg, log=print):
        raise NumericError("synthetic blow-up")

    monkeypatch.setattr(cli, "cmd_train", boom)
    assert cli.main(["train", "--config", str(cfg_path)]) == 3


def test_env_var_overrides_output_dir(tmp_path, monkeypatch):
    cfg_path = tmp_path / "c.cfg"
    cfg_path.write_text(BASE_CFG + "output_dir = ignored\n")
    override = tmp_path / "envout"
    monkeypatch.setenv("PMTRANS_OUT", str(override))
    monkeypatch.chdir(tmp_path)
    assert cli.main(["generate", "--config", str(cfg_path)]) == 0
    assert (override / "source.pmds").is_file()
    assert not (tmp_path / "ignored").exists()


# ------------------------------------------------------------------ eval


def test_eval_report_is_deterministic_and_per_class(workdir):
    out = workdir / "out"
    lines_a, lines_b = [], []
    rc = cli.cmd_eval(str(out / "model.ckpt"), str(out / "target.pmds"),
                      log=lines_a.append)
    assert rc == 0
    cli.cmd_eval(str(out / "model.ckpt"), str(out / "target.pmds"),
                 log=lines_b.append)
    assert lines_a == lines_b
    assert lines_a[1].startswith("overall ")
    assert sum(1 for ln in lines_a if ln.startswith("class ")) == 3


def test_eval_mismatched_dims_exits_data(workdir, tmp_path):
    spec = D.ShiftSpec()
    ds_s, _ = D.generate_pair(3, 6, spec, seed=1, image_size=8)
    other = tmp_path / "small.pmds"
    D.save_dataset(ds_s, str(other))
    out = workdir / "out"
    rc = cli.main(["eval", "--checkpoint", str(out / "model.ckpt"),
                   "--dataset", str(other)])
    assert rc == 2


def test_eval_without_sidecar_needs_config(tmp_path, workdir):
    ckpt = workdir / "out" / "model.ckpt"
    lone = tmp_path / "model.ckpt"
    lone.write_bytes(ckpt.read_bytes())
    rc = cli.main(["eval", "--checkpoint", str(lone),
                   "--dataset", str(workdir / "out" / "target.pmds")])
    assert rc == 1  # no config.resolved next to it
    rc = cli.main(["eval", "--checkpoint", str(lone),
                   "--dataset", str(workdir / "out" / "target.pmds"),
                   "--config", str(workdir / "run.cfg")])
    assert rc == 0


# ---------------------------------------------------------------- ablate


def test_ablate_summary_and_failure_isolation(workdir, tmp_path):
    cfg_path = workdir / "run.cfg"
    out_dir = tmp_path / "abl"
    import dataclasses
    env_cfg = dataclasses.replace(
        C.from_file(str(cfg_path)),
        output_dir=str(out_dir),
        source_path=str(workdir / "out" / "source.pmds"),
        target_path=str(workdir / "out" / "target.pmds"))
    lines = []
    rc = cli.cmd_ablate(env_cfg,
                        ["full:", "broken: epochs=-1",
                         "short: epochs=1, warmup_epochs=0"],
                        "0,1", log=lines.append)
    assert rc == 0
    table = (out_dir / "ablate_summary.csv").read_text().splitlines()
    assert table[0] == "full,broken,short"
    cells = table[1].split(",")
    assert cells[1] == "failed"
    assert 0.0 <= float(cells[0]) <= 1.0
    assert 0.0 <= float(cells[2]) <= 1.0
    assert any("broken seed 0 failed" in ln for ln in lines)


def test_ablate_rejects_duplicate_arm_names(workdir):
    rc = cli.main(["ablate", "--config", str(workdir / "run.cfg"),
                   "--arm", "a:", "--arm", "a: epochs=1"])
    assert rc == 1


def test_ablate_rejects_bad_seed_list(workdir):
    rc = cli.main(["ablate", "--config", str(workdir / "run.cfg"),
                   "--arm", "a:", "--seeds", "0,two"])
    assert rc == 1


# ------------------------------------------------------------ grad-check


def test_gradcheck_passes_and_reports_blocks(tmp_path):
    cfg_path = tmp_path / "g.cfg"
    cfg_path.write_text("seed = 3\n")
    lines = []
    rc = cli.cmd_gradcheck(C.from_file(str(cfg_path)), log=lines.append)
    assert rc == 0
    assert any(ln.startswith("block encoder:") and "PASS" in ln
               for ln in lines)
    assert any(ln.startswith("block classifier:") and "PASS" in ln
               for ln in lines)
    assert any("beta moment" in ln and "PASS" in ln for ln in lines)
    assert lines[-1] == "grad-check: PASS"


def test_gradcheck_detects_injected_sign_flip(tmp_path):
    cfg_path = tmp_path / "g.cfg"
    cfg_path.write_text("seed = 3\n")
    lines = []
    rc = cli.cmd_gradcheck(C.from_file(str(cfg_path)),
                           inject_sign_flip=True, log=lines.append)
    assert rc == 4
    assert any("FAIL" in ln for ln in lines)
