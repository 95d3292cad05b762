"""Criterion number -> (passed, detail), filled by test_acceptance and printed by conftest."""
RESULTS: dict[int, tuple[bool, str]] = {}
