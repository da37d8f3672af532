import shutil
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"


def _have_tool():
    try:
        from mbmdetect.codec import find_tool
        find_tool()
        import av  # noqa: F401
    except Exception:
        return False
    return True


HAVE_TOOL = _have_tool()
needs_tool = pytest.mark.skipif(not HAVE_TOOL, reason="no ffmpeg/PyAV available")


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture(scope="session")
def clip30(tmp_path_factory):
    """A procedurally generated 320x240, 30-frame clip, encoded once."""
    if not HAVE_TOOL:
        pytest.skip("no ffmpeg/PyAV available")
    from mbmdetect.codec import EncodeConfig
    from mbmdetect.synth import make_clip
    out = tmp_path_factory.mktemp("clips") / "clip30.mp4"
    return make_clip(out, 7, 1, EncodeConfig(), 320, 240, frames=30)


# acceptance criteria register their outcome here; the summary hook prints
# one line per criterion at the end of the run
ACCEPTANCE = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = ""):
    ACCEPTANCE[number] = (title, passed, detail)
    print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  [{detail}]")
