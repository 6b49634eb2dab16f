import pytest

from disengen.cli import main

TINY_SET = [
    "visdis.epochs=1", "visdis.batch_size=8", "visdis.base_width=4",
    "textdis.epochs=2", "textdis.batch_size=8",
    "dit.hidden_dim=32", "dit.depth=1", "dit.heads=2",
    "diffusion.batch_size=8", "diffusion.every_n=2", "diffusion.sample_steps=2",
]

CAPTION = ("a nevus lesion with blob shape, uneven boundary, skewed outline, moderate size, "
           "central middle position, pink color, normal intensity, regular visible texture and grainy background")


def cli(*argv) -> int:
    flags = []
    for s in TINY_SET:
        flags += ["--set", s]
    return main([*argv, *flags])


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A complete three-stage run at toy size, driven through the CLI."""
    d = tmp_path_factory.mktemp("tiny")
    p = {k: str(d / v) for k, v in dict(data="data", vis="vis.dgn", text="text.dgn", base="base.dgn",
                                         diff="diff.dgn").items()}
    p["dir"] = d
    assert main(["gen-data", "--n", "24", "--out", p["data"], "--seed", "0"]) == 0
    assert cli("train-visual", "--data", p["data"], "--out-ckpt", p["vis"]) == 0
    assert cli("train-text", "--data", p["data"], "--visual-ckpt", p["vis"], "--out-ckpt", p["text"]) == 0
    assert cli("train-diffusion", "--data", p["data"], "--visual-ckpt", p["vis"], "--text-ckpt", p["text"],
               "--out", p["diff"], "--base-ckpt", p["base"], "--max-steps", "4", "--pretrain-steps", "3") == 0
    return p


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
