"""Run the acceptance suite and print one pass/fail line per criterion."""
import subprocess
import sys
from pathlib import Path

root = Path(__file__).resolve().parent.parent
proc = subprocess.run(
    [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(root / "tests" / "test_acceptance.py")],
    cwd=root, capture_output=True, text=True,
)
lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("[PASS]", "[FAIL]"))]
print("\n".join(lines) if lines else proc.stdout)
sys.exit(proc.returncode)
