import numpy as np
import pytest

from subflow import cli
from subflow import config as cfgmod
from subflow import rasterizer as ras
from subflow import scene as sc
from subflow.errors import FormatError

SMALL_CFG = """\
seed = 0
scene.n = 100
camera.width = 32
camera.height = 32
camera.count = 8
flow.train_steps = 200
flow.mapping_steps = 200
flow.rounds = 2
flow.corpus = 16
distill.steps = 200
style.steps = 25
gen2d.corpus = 20
gen2d.steps = 150
"""


@pytest.fixture()
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CFG)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_dump_config_round_trips_byte_identical(capsys):
    assert run("dump-config") == 0
    dumped = capsys.readouterr().out
    reparsed = cfgmod.parse_config(dumped)
    assert reparsed.dump() == dumped


def test_config_rejects_unknown_key():
    with pytest.raises(FormatError, match="unknown"):
        cfgmod.parse_config("nonsense.key = 3\n")


def test_config_override_precedence(tmp_path, capsys):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 5\n")
    assert run("dump-config", "--config", path, "--seed", "9") == 0
    out = capsys.readouterr().out
    assert "seed = 9" in out.splitlines()[0]


def test_gen_scene_writes_loadable_gscn(tmp_path, small_cfg):
    out = tmp_path / "s.gscn"
    assert run("gen-scene", "--config", small_cfg, "--out", out) == 0
    scene = sc.load_scene(out)
    assert scene.count == 100


def test_stylize_mutually_exclusive_sources(tmp_path, small_cfg):
    rc = run("stylize", "--config", small_cfg, "--scene", tmp_path / "s.gscn",
             "--decoder", tmp_path / "d.prms", "--pipeline", tmp_path / "p",
             "--image", "a.ppm", "--text", "words", "--out", tmp_path / "o.gscn")
    assert rc == 2


def test_stylize_requires_some_source(tmp_path, small_cfg):
    rc = run("stylize", "--config", small_cfg, "--scene", tmp_path / "s.gscn",
             "--decoder", tmp_path / "d.prms", "--pipeline", tmp_path / "p",
             "--out", tmp_path / "o.gscn")
    assert rc == 2


def test_missing_input_file_exits_2(tmp_path, small_cfg):
    rc = run("embed", "--config", small_cfg, "--scene", tmp_path / "missing.gscn",
             "--out-scene", tmp_path / "d.gscn", "--out-decoder", tmp_path / "d.prms")
    assert rc == 2


def test_bad_config_file_exits_2(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("whatever = 3\n")
    assert run("dump-config", "--config", bad) == 2


@pytest.fixture(scope="module")
def pipeline_artifacts(tmp_path_factory):
    """Run the full command pipeline once into a shared directory."""
    root = tmp_path_factory.mktemp("cli-pipe")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL_CFG + f"out = {root}/runs\n")
    steps = [
        ("gen-scene", "--config", cfg, "--out", root / "s.gscn"),
        ("embed", "--config", cfg, "--scene", root / "s.gscn",
         "--out-scene", root / "sd.gscn", "--out-decoder", root / "dec.prms"),
        ("train-flow", "--config", cfg, "--out", root / "pipe"),
        ("train-style", "--config", cfg, "--scene", root / "sd.gscn",
         "--decoder", root / "dec.prms", "--pipeline", root / "pipe",
         "--out", root / "styled"),
        ("stylize", "--config", cfg, "--scene", root / "sd.gscn",
         "--decoder", root / "styled" / "decoder.prms", "--pipeline", root / "pipe",
         "--text", "molten copper sunset", "--out", root / "stylized.gscn"),
        ("render", "--config", cfg, "--scene", root / "stylized.gscn",
         "--out", root / "views", "--depth"),
        ("eval-align", "--config", cfg, "--pipeline", root / "pipe",
         "--out", root / "align.csv"),
        ("eval-consistency", "--config", cfg, "--scene", root / "stylized.gscn",
         "--out", root / "cons.csv"),
    ]
    for argv in steps:
        assert run(*argv) == 0, argv[0]
    return root


def test_pipeline_produces_all_artifacts(pipeline_artifacts):
    root = pipeline_artifacts
    for rel in ("s.gscn", "sd.gscn", "dec.prms", "pipe/manifest.txt", "pipe/rounds.csv",
                "pipe/mapping.prms", "pipe/velocity_1.prms", "styled/decoder.prms",
                "styled/discriminator.prms", "styled/train_log.csv", "stylized.gscn",
                "views/view_00.ppm", "views/depth_00.fmap", "align.csv", "cons.csv"):
        assert (root / rel).exists(), rel


def test_pipeline_stylize_changed_colors_not_geometry(pipeline_artifacts):
    root = pipeline_artifacts
    base = sc.load_scene(root / "sd.gscn")
    styled = sc.load_scene(root / "stylized.gscn")
    assert base.positions.tobytes() == styled.positions.tobytes()
    assert base.rotations.tobytes() == styled.rotations.tobytes()
    assert not np.array_equal(base.colors, styled.colors)


def test_pipeline_render_views_match_library(pipeline_artifacts):
    root = pipeline_artifacts
    scene = sc.load_scene(root / "stylized.gscn")
    cams = sc.camera_ring((0, 0, 0), 2.6, 8, elevation=1.2, focal=90.0, width=32, height=32)
    want = ras.render(scene, cams[0]).rgb
    got = ras.read_ppm(root / "views" / "view_00.ppm")
    assert np.abs(got - np.clip(want, 0, 1)).max() <= 1 / 255.0 + 1e-6


def test_pipeline_csvs_have_expected_headers(pipeline_artifacts):
    root = pipeline_artifacts
    assert (root / "pipe" / "rounds.csv").read_text().splitlines()[0] == \
        "round,sim_before,sim_after,fid_before,fid_after,displacement"
    assert (root / "align.csv").read_text().splitlines()[0] == "metric,range_or_round,value"
    assert (root / "styled" / "train_log.csv").read_text().splitlines()[0] == \
        "step,content,style,obs,flow,sup_disc,sup_gen,total"


def test_feat_driven_stylize(pipeline_artifacts, tmp_path):
    from subflow.encoders import FeatureEncoders, export_features, procedural_texture
    root = pipeline_artifacts
    enc = FeatureEncoders(seed=0)
    fs = enc.encode_clip_like([procedural_texture(3, i, size=32) for i in range(4)])
    feat = tmp_path / "ref.feat"
    export_features(feat, fs)
    cfg = root / "small.cfg"
    out = tmp_path / "via_feat.gscn"
    rc = run("stylize", "--config", cfg, "--scene", root / "sd.gscn",
             "--decoder", root / "styled" / "decoder.prms", "--pipeline", root / "pipe",
             "--feat", feat, "--out", out)
    assert rc == 0
    sc.load_scene(out).validate()


def test_train_flow_from_feat_files(pipeline_artifacts, tmp_path):
    from subflow.encoders import FeatureEncoders, export_features, procedural_texture
    root = pipeline_artifacts
    enc = FeatureEncoders(seed=0)
    imgs = [procedural_texture(9, i, size=32) for i in range(12)]
    export_features(tmp_path / "c.feat", enc.encode_clip_like(imgs))
    export_features(tmp_path / "v.feat", enc.encode_vgg_like(imgs))
    out = tmp_path / "pipe_feat"
    rc = run("train-flow", "--config", root / "small.cfg", "--out", out,
             "--feat-clip", tmp_path / "c.feat", "--feat-vgg", tmp_path / "v.feat")
    assert rc == 0
    assert (out / "rounds.csv").exists()
    assert (out / "velocity_2.prms").exists()


def test_train_flow_feat_flags_must_pair(pipeline_artifacts, tmp_path):
    root = pipeline_artifacts
    rc = run("train-flow", "--config", root / "small.cfg", "--out", tmp_path / "p",
             "--feat-clip", tmp_path / "only.feat")
    assert rc == 2


def test_numeric_failure_exits_3(pipeline_artifacts, tmp_path):
    # poisoned decoder checkpoint: NaN parameters surface as a numerics error
    from subflow.diffcore import load_params, save_params
    root = pipeline_artifacts
    arrays = load_params(root / "styled" / "decoder.prms")
    arrays[0] = np.full_like(arrays[0], np.nan)
    bad = tmp_path / "bad_decoder.prms"
    save_params(bad, arrays)
    rc = run("stylize", "--config", root / "small.cfg", "--scene", root / "sd.gscn",
             "--decoder", bad, "--pipeline", root / "pipe",
             "--text", "anything", "--out", tmp_path / "o.gscn")
    assert rc == 3


def test_render_features_flag(pipeline_artifacts, tmp_path):
    root = pipeline_artifacts
    out = tmp_path / "feat_views"
    assert run("render", "--config", root / "small.cfg", "--scene", root / "stylized.gscn",
               "--out", out, "--features") == 0
    fmap = ras.read_fmap(out / "features_00.fmap")
    assert fmap.shape == (32, 32, 32)


def test_threads_env_controls_render(pipeline_artifacts, tmp_path, monkeypatch):
    root = pipeline_artifacts
    monkeypatch.setenv("SUBFLOW_THREADS", "4")
    out = tmp_path / "views4"
    assert run("render", "--config", root / "small.cfg",
               "--scene", root / "stylized.gscn", "--out", out) == 0
    a = (out / "view_03.ppm").read_bytes()
    b = (root / "views" / "view_03.ppm").read_bytes()
    assert a == b
