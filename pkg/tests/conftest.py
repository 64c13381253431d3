import sys
from pathlib import Path

import refseg  # noqa: F401  (sets BLAS thread guards before numpy loads elsewhere)

sys.path.insert(0, str(Path(__file__).parent))
