import os
import sys

# ctest points this at the package staged in the build tree. An editable
# install would otherwise shadow it through its import hook.
_stage = os.environ.get("BSTLAB_STAGE_DIR")
if _stage:
    sys.path.insert(0, _stage)
    sys.meta_path[:] = [f for f in sys.meta_path if type(f).__name__ != "ScikitBuildRedirectingFinder"]
    sys.modules.pop("bstlab", None)
