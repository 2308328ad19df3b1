import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from csnn import cli
from csnn import kernels as kn
from csnn import pipeline as pl
from csnn.pipeline import ConfigError


# -- config --------------------------------------------------------------------

def test_parse_config_values_and_comments():
    cfg = pl.parse_config("""
# comment line
seed = 7
kernels = 8   # inline
brightness = auto
kernel_rate = 0.01
recruit_at_zero = no
pool = max_wta
""")
    assert cfg.seed == 7 and cfg.kernels == 8 and cfg.brightness is None
    assert cfg.kernel_rate == 0.01 and cfg.recruit_at_zero is False and cfg.pool == "max_wta"
    assert cfg.folds == 5 and cfg.target_hz == 50.0


def test_parse_config_defaults_match_library():
    cfg = pl.parse_config("")
    assert (cfg.kernels, cfg.kernel_size, cfg.stride) == (28, 9, 2)
    assert cfg.w_min == -5 / 3 / 255 and cfg.w_max == 5 / 255
    assert (cfg.learning_rate, cfg.weight_min, cfg.weight_max, cfg.microcolumns) == (0.0035, -0.0628, 0.152, 22)


@pytest.mark.parametrize("text,match", [
    ("colour = red", "unknown config key"),
    ("seed = abc", "bad value for seed"),
    ("recruit_at_zero = maybe", "bad value"),
    ("folds = 1", "folds >= 2"),
    ("pool = median", "pool in"),
    ("no equals sign here", "malformed"),
])
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        pl.parse_config(text)


def test_overrides_win_and_none_ignored(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 3\nfolds = 4\n")
    cfg = pl.load_config(p, seed=9, folds=None)
    assert cfg.seed == 9 and cfg.folds == 4


def test_dump_reparses():
    cfg = pl.parse_config("seed = 5\nkernels = 3\n")
    text = cfg.dump().replace("None", "auto").replace("'", "")
    assert pl.parse_config(text) == cfg


def test_sub_seeds_distinct_and_stable():
    names = ["kernels", "shuffle", "folds", "calibration", "train_order/0", "weight_init/0"]
    seeds = [pl.sub_seed(1, n) for n in names]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [pl.sub_seed(1, n) for n in names]
    assert pl.sub_seed(1, "kernels") != pl.sub_seed(2, "kernels")


# -- folds -----------------------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=120), st.integers(2, 7), st.integers(0, 1000))
def test_stratified_folds_partition(labels, k, seed):
    labels = np.array(labels)
    folds = pl.stratified_folds(labels, k, seed)
    assert len(folds) == k
    allidx = np.concatenate(folds)
    assert np.array_equal(np.sort(allidx), np.arange(len(labels)))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for c in np.unique(labels):
        per = [int((labels[f] == c).sum()) for f in folds]
        assert max(per) - min(per) <= 1
    assert all(np.array_equal(a, b) for a, b in zip(folds, pl.stratified_folds(labels, k, seed)))


# -- viz -------------------------------------------------------------------------

def test_kernel_colors_diverging():
    rgb = pl.kernel_colors(np.array([-1.0, 0.0, 1.0, 0.5]), 1.0)
    assert rgb[0].tolist() == [0, 0, 255]
    assert rgb[1].tolist() == [255, 255, 255]
    assert rgb[2].tolist() == [255, 0, 0]
    assert rgb[3].tolist() == [255, 128, 128]


def test_render_bank_layout():
    params = kn.LearnerParams(K=3, n_kernels=5, corpus_size=1)
    bank = kn.init_bank(params)
    bank.W[2, 0, 0] = 1.0
    bank.refresh()
    img = pl.render_bank(bank, cell=2, gap=1)
    # 3 columns x 2 rows of 6-pixel tiles with 1-pixel gaps
    assert img.shape == (2 * 6 + 3, 3 * 6 + 4, 3)
    assert img[0, 0].tolist() == [128, 128, 128]
    assert img[1, 1 + 2 * 7].tolist() == [255, 0, 0]


# -- end to end ------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert cli.main(["synth", "--out", str(root / "data"), "--count", "60", "--seed", "2"]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(f"raw_dir = {root / 'data'}\nwork_dir = {root / 'work'}\nkernels = 4\n"
                   "folds = 2\ncalib_sample = 12\nmicrocolumns = 4\n")
    return root, cfg


def test_cli_stages(small_run, capsys):
    root, cfg = small_run
    work = root / "work"
    assert cli.main(["prep", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "patches 60" in out and "label blobs 20" in out
    assert len(list((work / "patches").glob("*.png"))) == 60
    assert cli.main(["learn", "--config", str(cfg)]) == 0
    bank = kn.load_bank(work / "kernels.txt")
    assert bank.W.shape == (4, 9, 9)
    assert (work / "learning_log.csv").is_file() and (work / "learn_summary.txt").is_file()
    assert cli.main(["viz", "--config", str(cfg)]) == 0
    assert Image.open(work / "kernels.png").mode == "RGB"
    assert cli.main(["calibrate", "--config", str(cfg)]) == 0
    assert "converged True" in (work / "calibration.txt").read_text()
    assert cli.main(["eval", "--config", str(cfg)]) == 0
    summary = (work / "eval_summary.txt").read_text()
    assert "mean_accuracy" in summary and "reference network 9412" in summary
    folds = (work / "eval_folds.csv").read_text().splitlines()
    assert folds[0] == "fold,n_train,n_test,status,accuracy,train_accuracy,scale,pool_rate_hz"
    assert len(folds) == 3 and all(",ok," in row for row in folds[1:])
    conf = (work / "eval_confusion.csv").read_text().splitlines()
    assert conf[0] == "true,blobs,hbars,vbars"
    total = sum(int(v) for row in conf[1:] for v in row.split(",")[1:])
    assert total == 60
    assert (work / "train_log_fold1.csv").is_file()


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["learn", "--out", str(tmp_path / "nowhere")]) == 1
    assert "run prep first" in capsys.readouterr().err
    assert cli.main(["prep", "--config", str(tmp_path / "missing.cfg")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus = 1\n")
    assert cli.main(["eval", "--config", str(bad)]) == 1
    assert "unknown config key" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])


def test_cli_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit):
        cli.main(["eval", "--help"])
    out = capsys.readouterr().out
    for key in pl.CONFIG_KEYS:
        assert key in out


def test_calibration_failure_is_reported(small_run, tmp_path):
    root, cfg = small_run
    work = tmp_path / "w"
    (work / "patches").mkdir(parents=True)
    blank = np.zeros((31, 31), np.uint8)
    from csnn.preprocess import save_gray, write_patch_manifest
    for i in range(4):
        save_gray(work / f"patches/p{i}.png", blank)
    write_patch_manifest(work / "patches.csv", [(f"patches/p{i}.png", "x") for i in range(4)])
    bank = kn.init_bank(kn.LearnerParams(n_kernels=2, corpus_size=1))
    kn.save_bank(work / "kernels.txt", bank)
    assert cli.main(["calibrate", "--out", str(work)]) == 1
    assert "converged False" in (work / "calibration.txt").read_text()
