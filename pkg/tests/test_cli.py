import json

import numpy as np
import pytest

from ndvq import cli, codec
from ndvq.signal import AudioBuffer, load_wav, save_wav

TINY = [
    "steps=2",
    "batch_size=2",
    "clip_length=256",
    "codec.latent_dim=4",
    "codec.channels=4",
    "codec.codebook_size=16",
    "codec.n_layers=2",
    "data.n_clips=10",
    "data.clip_length=512",
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--out", str(out), "-q", *TINY]) == 0
    return out


@pytest.fixture()
def wav(tmp_path):
    path = tmp_path / "in.wav"
    t = np.arange(1000) / 8000
    save_wav(path, AudioBuffer(0.5 * np.sin(2 * np.pi * 440 * t), 8000))
    return path


def test_overrides_parse_json_values():
    out = cli.apply_overrides({"a": {"b": 1}}, ["a.b=2.5", "c=ndvq", "d=[1,2]", "e=true"])
    assert out == {"a": {"b": 2.5}, "c": "ndvq", "d": [1, 2], "e": True}
    with pytest.raises(cli.CliError):
        cli.apply_overrides({}, ["novalue"])


def test_resolve_config_layering(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"steps": 7, "codec": {"channels": 8}}))
    cfg = cli.resolve_config(str(path), ["steps=9"], seed=5)
    assert (cfg.steps, cfg.codec.channels, cfg.seed, cfg.codec.latent_dim) == (9, 8, 5, 32)


def test_train_outputs(trained, capsys):
    assert (trained / "losses.csv").exists()
    assert len((trained / "losses.csv").read_text().splitlines()) == 3
    assert {p.name for p in (trained / "checkpoint").iterdir()} == {"codebooks.ndvq", "model.ndvm", "config.json"}


def test_seed_flag_anywhere(tmp_path):
    for argv in (["--seed", "3", "train"], ["train", "--seed", "3"]):
        out = tmp_path / argv[0]
        assert cli.main([*argv, "--out", str(out), "-q", *TINY, "steps=0"]) == 0
        assert json.loads((out / "checkpoint" / "config.json").read_text())["seed"] == 3


def test_malformed_config_leaves_no_files(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(bad), "--out", str(out)]) != 0
    assert not out.exists()
    assert "not valid JSON" in capsys.readouterr().err
    assert cli.main(["train", "--out", str(out), "bogus=1"]) != 0
    assert not out.exists()


def test_encode_decode_round_trip(trained, wav, tmp_path, capsys):
    stream, back = tmp_path / "x.ndvc", tmp_path / "out.wav"
    assert cli.main(["encode", str(trained / "checkpoint"), str(wav), str(stream), "--bandwidth", "20"]) == 0
    assert "n_q=2 frames=125" in capsys.readouterr().out
    header, grid = codec.unpack_bitstream(stream.read_bytes())
    assert header.n_q == 2 and grid.shape == (125, 2)
    assert cli.main(["decode", str(trained / "checkpoint"), str(stream), str(back)]) == 0
    audio = load_wav(back)
    assert audio.sample_rate == 8000 and len(audio) == 1000


def test_encode_invalid_bandwidth(trained, wav, tmp_path, capsys):
    assert cli.main(["encode", str(trained / "checkpoint"), str(wav), str(tmp_path / "x"), "--bandwidth", "7"]) == 1
    err = capsys.readouterr().err
    assert "valid: 10, 20" in err and not (tmp_path / "x").exists()


def test_decode_mismatched_latent_dim(trained, tmp_path, capsys):
    header = codec.StreamHeader(8000, (2, 2, 2), 5, 16, 1, 3)
    stream = tmp_path / "x.ndvc"
    stream.write_bytes(codec.pack_bitstream(np.zeros((3, 1), dtype=int), header))
    assert cli.main(["decode", str(trained / "checkpoint"), str(stream), str(tmp_path / "o.wav")]) == 1
    assert "latent_dim (stream 5, checkpoint 4)" in capsys.readouterr().err


def test_decode_corrupt_stream(trained, tmp_path, capsys):
    stream = tmp_path / "x.ndvc"
    stream.write_bytes(b"JUNKJUNKJUNK")
    assert cli.main(["decode", str(trained / "checkpoint"), str(stream), str(tmp_path / "o.wav")]) == 1
    assert "magic" in capsys.readouterr().err


def test_eval_writes_reports(trained, tmp_path, capsys):
    out = tmp_path / "ev"
    assert cli.main(["eval", str(trained / "checkpoint"), "--synthetic", "--bandwidth", "10", "20", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["eval_10kbps.json", "eval_10kbps.txt", "eval_20kbps.json", "eval_20kbps.txt"]
    assert json.loads((out / "eval_10kbps.json").read_text())["n_q"] == 1
    assert "si_sdr=" in capsys.readouterr().out


def test_eval_on_wav_directory(trained, wav, capsys):
    assert cli.main(["eval", str(trained / "checkpoint"), "--data", str(wav.parent)]) == 0
    assert "n_clips=1" in capsys.readouterr().out


def test_stats_tables(trained, capsys):
    assert cli.main(["stats", str(trained / "checkpoint"), "--synthetic"]) == 0
    out = capsys.readouterr().out
    assert "kind=normal layers=2 K=16 D=4" in out
    assert "usage entropy" in out and "    1" in out


def test_stats_fresh_init_sigma_is_one(tmp_path, capsys):
    out = tmp_path / "r"
    assert cli.main(["train", "--out", str(out), "-q", *TINY, "steps=0"]) == 0
    capsys.readouterr()
    assert cli.main(["stats", str(out / "checkpoint")]) == 0
    rows = capsys.readouterr().out.splitlines()[2:]
    assert len(rows) == 2
    for row in rows:
        assert row.split()[1:4] == ["1.0000", "1.0000", "1.0000"]


def test_entropy_table_marks_highlight_layers():
    lines = cli.entropy_table([10.0] * 32).splitlines()
    assert len(lines) == 33
    marked = [int(line.split()[0]) for line in lines[1:] if line.endswith("*")]
    assert marked == [1, 8, 16, 32]
    assert lines[1].split()[1] == "10.00"


def test_missing_checkpoint(tmp_path, capsys):
    assert cli.main(["stats", str(tmp_path)]) == 1
    assert "missing config.json" in capsys.readouterr().err


def test_module_entry_point(trained):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "ndvq", "stats", str(trained / "checkpoint")], capture_output=True, text=True)
    assert proc.returncode == 0 and "sigma_mean" in proc.stdout
