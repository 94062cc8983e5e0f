"""Static check that student-side code never reaches ground-truth labels."""
import ast
import inspect
import textwrap

from hoidistill import cli, distill, estimators

# code paths that make up supervision and student training
STUDENT_PATHS = [
    distill.precompute_supervision,
    distill.prepare_features,
    distill.train,
    distill.compute_losses,
    cli.cmd_supervise,
    cli.cmd_train,
    estimators.HOIStudent.fit,
]
FORBIDDEN_NAMES = {"gt", "gt_from_json", "labeled_crops", "load_labels", "train_counts", "GtInstance"}


def gt_references(fn):
    """List of offending constructs in ``fn``'s source."""
    tree = ast.parse(textwrap.dedent(inspect.getsource(fn)))
    bad = []
    for node in ast.walk(tree):
        if isinstance(node, ast.Attribute) and node.attr in FORBIDDEN_NAMES:
            bad.append(f"attribute .{node.attr}")
        elif isinstance(node, ast.Name) and node.id in FORBIDDEN_NAMES:
            bad.append(f"name {node.id}")
        elif isinstance(node, ast.keyword) and node.arg == "with_gt":
            if not (isinstance(node.value, ast.Constant) and node.value.value is False):
                bad.append("with_gt=")
        elif isinstance(node, ast.Constant) and isinstance(node.value, str) and "gt.json" in node.value:
            bad.append("gt.json literal")
    return bad


def audit():
    return {f"{fn.__module__}.{fn.__qualname__}": gt_references(fn) for fn in STUDENT_PATHS}
