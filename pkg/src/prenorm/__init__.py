"""prenorm: rule-driven normalization of prefix-token math expressions.

The package discovers rewrite rules offline by numeric equivalence over
enumerated expression pools, then applies them online together with
n-ary cancellation and commutative canonicalization.  It also ships a
synthetic data generator with holdout decontamination, evaluation
metrics for symbolic recovery, and a command-line interface.
"""

from .vocab import (
    Alphabet,
    CONST,
    InvalidToken,
    MAX_VARIABLES,
    N_OPERATORS,
    OperatorInfo,
    OPERATORS,
    full_alphabet,
    token_from_name,
    name_of,
)
from .expr import (
    EmptyExpression,
    ExpressionError,
    OverfullExpression,
    PrefixExpr,
    UnderfullExpression,
    UnknownToken,
    canonicalize,
    format_infix,
    format_prefix,
    parse_prefix,
    validate,
)
from .evaluate import ConstantTarget, EvalPlan, compile_expr, evaluate, fvu
from .fit import (
    EquivalenceConfig,
    FitResult,
    allclose_extended,
    equivalent,
    fit_constants,
    levmar,
    parsimony_score,
    select_best,
)
from .simplify import (
    RuleIndex,
    build_index,
    cancellation_pass,
    match_pattern,
    rules_pass,
    simplify,
    substitute,
)
from .rules import (
    Rule,
    RuleSet,
    RulesFileError,
    discover_rules,
    enumerate_expressions,
    load_rules,
    save_rules,
    validate_rule,
)
from .datagen import (
    Contaminated,
    DataRejected,
    Degenerate,
    GenConfig,
    HoldoutIndex,
    Rejection,
    SimplifiedToNonFinite,
    TrainingInstance,
    build_holdout_index,
    generate_stream,
    instance_seed,
    is_contaminated,
    read_dataset,
    read_holdout,
    sample_instance,
    sample_n_ops,
    sample_skeleton,
    write_dataset,
)
from .metrics import (
    EPS32,
    SkeletonReport,
    TooFewValues,
    bootstrap_ci,
    numeric_recovery,
    report_header,
    report_row,
    skeleton_report,
    token_f1,
    total_nestedness,
    zss_distance,
)

__version__ = "1.0.0"

__all__ = [
    "Alphabet",
    "CONST",
    "ConstantTarget",
    "Contaminated",
    "DataRejected",
    "Degenerate",
    "EPS32",
    "EmptyExpression",
    "EquivalenceConfig",
    "EvalPlan",
    "ExpressionError",
    "FitResult",
    "GenConfig",
    "HoldoutIndex",
    "InvalidToken",
    "MAX_VARIABLES",
    "N_OPERATORS",
    "OperatorInfo",
    "OPERATORS",
    "OverfullExpression",
    "PrefixExpr",
    "Rejection",
    "Rule",
    "RuleIndex",
    "RuleSet",
    "RulesFileError",
    "SimplifiedToNonFinite",
    "SkeletonReport",
    "TooFewValues",
    "TrainingInstance",
    "UnderfullExpression",
    "UnknownToken",
    "allclose_extended",
    "bootstrap_ci",
    "build_holdout_index",
    "build_index",
    "cancellation_pass",
    "canonicalize",
    "compile_expr",
    "discover_rules",
    "enumerate_expressions",
    "equivalent",
    "evaluate",
    "fit_constants",
    "format_infix",
    "format_prefix",
    "full_alphabet",
    "fvu",
    "generate_stream",
    "instance_seed",
    "is_contaminated",
    "levmar",
    "load_rules",
    "match_pattern",
    "name_of",
    "numeric_recovery",
    "parse_prefix",
    "parsimony_score",
    "read_dataset",
    "read_holdout",
    "report_header",
    "report_row",
    "rules_pass",
    "sample_instance",
    "sample_n_ops",
    "sample_skeleton",
    "save_rules",
    "select_best",
    "simplify",
    "skeleton_report",
    "substitute",
    "token_f1",
    "token_from_name",
    "total_nestedness",
    "validate",
    "validate_rule",
    "write_dataset",
    "zss_distance",
    "__version__",
]
