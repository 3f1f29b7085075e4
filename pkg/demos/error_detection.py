"""Replay the surface-treatment scenarios and print what the bridge reports.

Run with ``python3 demos/error_detection.py``.  In ``default`` a work piece
vanishes from bath 1 while the arm is elsewhere, so the workshop VS raises an
alarm and the camera VS turns towards bath 1.  In ``arm_above`` the arm is over
the bath when the piece is lifted, which is normal operation and stays silent.
"""

from __future__ import annotations

from opcbridge.demo import check, load_scenario, run_demo


def main() -> None:
    for name in ("default", "arm_above", "quiet"):
        scenario = load_scenario(name)
        print(f"== {name}")
        for action in scenario.actions:
            print(f"   write {action.item} = {action.value!r} at {action.at_ms} ms")
        log = run_demo(scenario)
        print("   events:" if log else "   events: none")
        for event in log:
            print(f"     {event}")
        result = check(log, scenario.expected)
        print(f"   matches expectations: {result.passed}")
        for line in result.diff:
            print(f"     {line}")


if __name__ == "__main__":
    main()
