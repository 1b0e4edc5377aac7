from moase_tta.log_utils import ensure_log_path, format_fields, log_event, write_log


def test_ensure_log_path_creates_missing_directories(tmp_path):
    path = ensure_log_path(tmp_path / "nested" / "deeper" / "run.log")
    assert path.exists()
    assert path.read_text() == ""


def test_write_log_appends_timestamped_lines(tmp_path):
    path = tmp_path / "run.log"
    write_log("first", path)
    write_log("second", path)
    lines = path.read_text().splitlines()
    assert [line.split(" ", 1)[1] for line in lines] == ["first", "second"]
    assert all(line.split(" ", 1)[0].endswith("Z") for line in lines)


def test_log_event_renders_fields(tmp_path):
    path = tmp_path / "run.log"
    log_event("domain_summary", path, round=1, domain="smooth", error=0.123456789)
    log_event("episode_done", path)
    lines = [line.split(" ", 1)[1] for line in path.read_text().splitlines()]
    assert lines == ["domain_summary round=1 domain=smooth error=0.123457", "episode_done"]
    assert format_fields() == ""
