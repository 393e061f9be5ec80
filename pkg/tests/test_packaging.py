import tomllib
from pathlib import Path


def _pyproject() -> dict:
    pyproject_path = Path(__file__).resolve().parents[1] / "pyproject.toml"
    with pyproject_path.open("rb") as file:
        return tomllib.load(file)


def test_project_scripts_include_crowdmlp_cli() -> None:
    pyproject = _pyproject()

    assert pyproject["project"]["name"] == "crowdmlp"
    assert pyproject["project"]["scripts"] == {"crowdmlp": "crowd_mlp.cli:main"}


def test_runtime_dependencies_cover_numeric_config_and_image_stack() -> None:
    dependencies = " ".join(_pyproject()["project"]["dependencies"])

    for package in ("numpy", "pillow", "pydantic"):
        assert package in dependencies
