"""
End-to-end tests of the ambient-align command line on the tiny scenario.
"""

import json

import pandas as pd
import pytest
from click.testing import CliRunner

from ambient_align import pipeline
from ambient_align.cli import cli
from ambient_align.conftest import tiny_config_dict


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict()))
    return str(path)


def _invoke(*args):
    return CliRunner().invoke(cli, list(args), catch_exceptions=False)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, config_file):
    run = tmp_path_factory.mktemp("run")
    for command in ("generate", "stage1", "stage2", "probe", "analyze", "export"):
        result = _invoke(command, "-c", config_file, "-o", str(run))
        assert result.exit_code == 0, f"{command}: {result.output}"
    return run


def test_full_pipeline_writes_every_artifact(finished_run):
    for name in (f"{pipeline.DATASET_DIR}/manifest.json", pipeline.STAGE1_CHECKPOINT, pipeline.STAGE1_LOG,
                 pipeline.STAGE2_CHECKPOINT, pipeline.STAGE2_LOG, pipeline.WEIGHTS_CDF, pipeline.PROBE_RESULT,
                 pipeline.ANALYSIS_RESULT, pipeline.CLASSWISE_TABLE, pipeline.EMBEDDINGS_TABLE,
                 pipeline.RUN_RECORD):
        assert (finished_run / name).exists(), name


def test_run_record_lists_every_command(finished_run):
    record = json.loads((finished_run / pipeline.RUN_RECORD).read_text())
    assert set(record["commands"]) == {"generate", "stage1", "stage2", "probe", "analyze", "export"}
    hashes = {entry["config_hash"] for entry in record["commands"].values()}
    assert len(hashes) == 1


def test_probe_result_is_well_formed(finished_run):
    payload = json.loads((finished_run / pipeline.PROBE_RESULT).read_text())
    assert 0.0 <= payload["weighted_f1"] <= 1.0
    assert 0.0 <= payload["mAP"] <= 1.0


def test_phase_space_export(finished_run, config_file):
    dataset = pipeline.open_dataset(finished_run)
    query = int(dataset.labels["window_index"].to_numpy()[dataset.indices("pretrain")[0]])
    result = _invoke("analyze", "-c", config_file, "-o", str(finished_run), "--query", str(query))
    assert result.exit_code == 0, result.output
    table = pd.read_csv(finished_run / pipeline.PHASE_SPACE_TABLE)
    assert len(table) > 0


def test_ablation_table(finished_run, config_file):
    result = _invoke("ablate", "-c", config_file, "-o", str(finished_run), "--variant", "full",
                     "--variant", "uniform")
    assert result.exit_code == 0, result.output
    table = pd.read_csv(finished_run / pipeline.ABLATION_TABLE)
    assert table["variant"].tolist() == ["full", "uniform"]


def _full_chain(root, config_file):
    for command in ("generate", "stage1", "stage2", "probe"):
        result = _invoke(command, "-c", config_file, "-o", str(root))
        assert result.exit_code == 0, f"{command}: {result.output}"
    return root


def test_two_full_runs_are_byte_identical(tmp_path, config_file):
    first = _full_chain(tmp_path / "first", config_file)
    second = _full_chain(tmp_path / "second", config_file)
    for name in (pipeline.PROBE_RESULT, pipeline.WEIGHTS_CDF):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_probe_rerun_is_reproducible(finished_run, config_file):
    before = (finished_run / pipeline.PROBE_RESULT).read_bytes()
    assert _invoke("probe", "-c", config_file, "-o", str(finished_run)).exit_code == 0
    assert (finished_run / pipeline.PROBE_RESULT).read_bytes() == before


def test_stage2_without_stage1_is_a_usage_error(tmp_path, config_file):
    assert _invoke("generate", "-c", config_file, "-o", str(tmp_path)).exit_code == 0
    result = _invoke("stage2", "-c", config_file, "-o", str(tmp_path))
    assert result.exit_code == 2


def test_missing_dataset_is_a_usage_error(tmp_path, config_file):
    assert _invoke("stage1", "-c", config_file, "-o", str(tmp_path)).exit_code == 2


def test_invalid_override_is_a_usage_error(tmp_path, config_file):
    result = _invoke("generate", "-c", config_file, "-o", str(tmp_path), "--set", "split.fractions=[0.5,0.5,0.5,0.5]")
    assert result.exit_code == 2
    assert "split.fractions" in result.output
    assert not (tmp_path / pipeline.DATASET_DIR).exists()
