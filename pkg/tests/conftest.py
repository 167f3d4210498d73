import pytest

from hourglass import config as C


def tiny_config(tmp_path=None) -> C.RunConfig:
    """A model and corpus small enough for a few seconds of training per stage."""
    cfg = C.desk_config()
    cfg.dataset.n_objects = 10
    cfg.dataset.views_per_object = 4
    cfg.model = C.ModelConfig(resolution=16, latent_dim=8, const_channels=8, volume_channels=8,
                              rotated_channels=4, projection_channels=16, channels_2d=16, mapping_hidden=16,
                              encoder_channels=8, disc_channels=8)
    for stage in (cfg.stage1, cfg.stage2):
        stage.epochs = 2
        stage.decay_start_epoch = 1
        stage.batch_size = 8
    cfg.finetune.steps = 3
    cfg.fit.steps = 3
    if tmp_path is not None:
        cfg.output_dir = str(tmp_path / "run")
    return cfg


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(tmp_path)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
