import json
from pathlib import Path

import pytest

from siam.corpus import persist_dataset
from siam.critic import OracleBackend, ScriptedBackend
from siam.orchestrator import (
    ConfigError,
    ResumableInterruption,
    RunLockError,
    run_iteration,
    validate_config,
    verify_run,
)

from fixtures_pipeline import build_fixture

SMALL_IDS = ["q01", "q02", "q11", "q12", "q14"]
# Hand trace for the subset: value_sft 4+3; sft 5+2+3 (q11, q12, q14);
# sft_hard only q12 (q11 all-Yes, q14 has two No); dpo q12+q14.
SMALL_COUNTS = {"value_sft": 7, "sft": 10, "sft_hard": 1, "dpo_pairs": 2}


@pytest.fixture
def small_fixture(tmp_path):
    records, generator = build_fixture()
    subset = [r for r in records if r.id in SMALL_IDS]
    corpus_path = tmp_path / "corpus.jsonl"
    persist_dataset(subset, corpus_path)
    return subset, generator, corpus_path


def make_config(tmp_path, corpus_path, out_name="run", **overrides):
    data = {
        "run": {"iteration": 0, "seed": 1234, "output_dir": str(tmp_path / out_name)},
        "corpus": {"paths": [str(corpus_path)]},
        "generator": {"kind": "echo"},
        "critic": {"backend": "oracle"},
        "exec": {"wall_time_ms": 8000, "workers": 4},
    }
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    return validate_config(data)


class TestValidateConfig:
    def test_minimal_config_applies_defaults(self, tmp_path, small_fixture):
        _, _, corpus_path = small_fixture
        config = make_config(tmp_path, corpus_path)
        assert config.filters.samples_per_question == 5
        assert config.filters.lambda1 == 0.8
        assert config.filters.lambda2 == 3
        assert config.filters.keep_limit == 4
        assert config.filters.seed_max_iters == 3
        assert config.loss.beta == 0.1
        assert config.loss.sft_weight == 1.0
        echoed = config.raw["filter"]
        assert echoed == {
            "lambda1": 0.8,
            "lambda2": 3,
            "keep_limit": 4,
            "samples_per_question": 5,
            "seed_max_iters": 3,
        }

    def test_lambda1_out_of_range(self, tmp_path, small_fixture):
        _, _, corpus_path = small_fixture
        with pytest.raises(ConfigError) as excinfo:
            make_config(tmp_path, corpus_path, filter={"lambda1": 1.5})
        assert any("lambda1 out of [0, 1]" in e for e in excinfo.value.errors)

    def test_missing_corpus_path_named(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            validate_config(
                {
                    "run": {"output_dir": str(tmp_path / "run")},
                    "corpus": {"paths": [str(tmp_path / "nope.jsonl")]},
                }
            )
        assert any("corpus path does not exist" in e for e in excinfo.value.errors)

    def test_all_violations_listed_at_once(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            validate_config(
                {
                    "run": {"output_dir": str(tmp_path / "run"), "iteration": -1},
                    "corpus": {"paths": []},
                    "filter": {"lambda1": 2.0, "keep_limit": 0},
                    "exec": {"wall_time_ms": 10},
                    "loss": {"kind": "ppo"},
                }
            )
        errors = excinfo.value.errors
        assert len(errors) >= 5

    def test_toml_file_round_trip(self, tmp_path, small_fixture):
        _, _, corpus_path = small_fixture
        config_path = tmp_path / "run.toml"
        config_path.write_text(
            "\n".join(
                [
                    "[run]",
                    "iteration = 1",
                    "seed = 9",
                    'output_dir = "rundir"',
                    "[corpus]",
                    f'paths = ["{corpus_path}"]',
                    "[filter]",
                    "lambda1 = 0.9",
                ]
            ),
            encoding="utf-8",
        )
        config = validate_config(config_path)
        assert config.iteration == 1
        assert config.filters.lambda1 == 0.9
        assert config.output_dir == tmp_path / "rundir"


class TestRunIteration:
    def test_counts_match_hand_trace(self, tmp_path, small_fixture):
        records, generator, corpus_path = small_fixture
        config = make_config(tmp_path, corpus_path)
        result = run_iteration(config, generator=generator)
        counts = result.manifest.counts
        assert counts["sampled"] == len(records) * 5
        assert counts["executed"] == counts["sampled"]
        assert counts["judged"] == 15
        for name, expected in SMALL_COUNTS.items():
            assert counts[name] == expected, name
        assert verify_run(result.run_dir, records) == []

    def test_run_directory_layout(self, tmp_path, small_fixture):
        records, generator, corpus_path = small_fixture
        config = make_config(tmp_path, corpus_path)
        result = run_iteration(config, generator=generator)
        for rel in (
            "samples/samples.jsonl",
            "outcomes/outcomes.jsonl",
            "judgments/judgments.jsonl",
            "datasets/value_sft.jsonl",
            "datasets/sft.jsonl",
            "datasets/sft_hard.jsonl",
            "datasets/dpo_pairs.jsonl",
            "datasets/handoff.json",
            "manifest.json",
        ):
            assert (result.run_dir / rel).is_file(), rel
        handoff = json.loads((result.run_dir / "datasets/handoff.json").read_text())
        assert handoff["loss"]["kind"] == "dpo_sft"
        assert handoff["datasets"]["dpo_pairs"]["count"] == SMALL_COUNTS["dpo_pairs"]

    def test_outcome_stage_rows_have_no_timing(self, tmp_path, small_fixture):
        records, generator, corpus_path = small_fixture
        config = make_config(tmp_path, corpus_path)
        result = run_iteration(config, generator=generator)
        lines = (result.run_dir / "outcomes/outcomes.jsonl").read_text().splitlines()
        assert lines
        assert all("wall_time_ms" not in json.loads(line) for line in lines)

    def test_empty_corpus_valid_empty_run(self, tmp_path):
        corpus_path = tmp_path / "empty.jsonl"
        corpus_path.write_text("", encoding="utf-8")
        config = make_config(tmp_path, corpus_path)
        result = run_iteration(config)
        assert result.manifest.counts["sampled"] == 0
        assert result.manifest.counts["dpo_pairs"] == 0
        assert (result.run_dir / "datasets/dpo_pairs.jsonl").read_bytes() == b""

    def test_determinism_across_run_directories(self, tmp_path, small_fixture):
        records, generator, corpus_path = small_fixture
        first = run_iteration(make_config(tmp_path, corpus_path, out_name="a"), generator=generator)
        second = run_iteration(make_config(tmp_path, corpus_path, out_name="b"), generator=generator)
        for name in ("sampled", "executed", "judged", "value_sft", "sft", "sft_hard", "dpo_pairs", "handoff"):
            assert (
                first.manifest.outputs[name]["digest"]
                == second.manifest.outputs[name]["digest"]
            ), name


def _tree_bytes(run_dir):
    out = {}
    for sub in ("samples", "outcomes", "judgments", "datasets"):
        for path in sorted((Path(run_dir) / sub).rglob("*")):
            if path.is_file():
                out[str(path.relative_to(run_dir))] = path.read_bytes()
    return out


class TestResume:
    def test_resume_is_byte_identical_to_uninterrupted(self, tmp_path, small_fixture):
        records, generator, corpus_path = small_fixture
        straight = run_iteration(
            make_config(tmp_path, corpus_path, out_name="straight"), generator=generator
        )
        interrupted_config = make_config(tmp_path, corpus_path, out_name="interrupted")
        partial = run_iteration(interrupted_config, generator=generator, stop_after="judged")
        assert partial.completed_stage == "judged"
        assert not (partial.run_dir / "datasets/handoff.json").exists()
        resumed = run_iteration(interrupted_config, generator=generator, resume=True)
        assert resumed.completed_stage == "forged"
        assert _tree_bytes(straight.run_dir) == _tree_bytes(resumed.run_dir)

    def test_resume_with_changed_config_refused(self, tmp_path, small_fixture):
        records, generator, corpus_path = small_fixture
        config = make_config(tmp_path, corpus_path)
        run_iteration(config, generator=generator, stop_after="sampled")
        changed = make_config(tmp_path, corpus_path, run={"seed": 999})
        with pytest.raises(ConfigError, match="resume refused"):
            run_iteration(changed, generator=generator, resume=True)

    def test_backend_outage_checkpoints_then_resumes(self, tmp_path, small_fixture):
        records, generator, corpus_path = small_fixture
        config = make_config(tmp_path, corpus_path)
        broken = ScriptedBackend(replies=[])
        with pytest.raises(ResumableInterruption):
            run_iteration(config, generator=generator, critic_backend=broken)
        resumed = run_iteration(
            config, generator=generator, critic_backend=OracleBackend(), resume=True
        )
        assert resumed.completed_stage == "forged"
        assert resumed.manifest.counts["dpo_pairs"] == SMALL_COUNTS["dpo_pairs"]

    def test_partial_stage_outputs_never_consumed(self, tmp_path, small_fixture):
        records, generator, corpus_path = small_fixture
        config = make_config(tmp_path, corpus_path)
        run_iteration(config, generator=generator, stop_after="executed")
        # Corrupt the executed stage file; resume must recompute, not trust it.
        outcome_file = config.output_dir / "outcomes/outcomes.jsonl"
        outcome_file.write_text("garbage\n", encoding="utf-8")
        resumed = run_iteration(config, generator=generator, resume=True)
        assert resumed.completed_stage == "forged"
        assert resumed.manifest.counts["executed"] == len(records) * 5

    def test_lock_prevents_second_writer(self, tmp_path, small_fixture):
        records, generator, corpus_path = small_fixture
        config = make_config(tmp_path, corpus_path)
        config.output_dir.mkdir(parents=True)
        (config.output_dir / ".lock").write_text("123")
        with pytest.raises(RunLockError):
            run_iteration(config, generator=generator)
