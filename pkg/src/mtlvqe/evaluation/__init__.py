from .bdrate import BDRateError, RDCurve, RDPoint, bd_rate, bd_rate_detail
from .evaluate import evaluate_model, evaluate_pairs, restore, restore_sequential
from .inspect import average_feature_maps
from .metrics import delta_metrics, psnr_luma, ssim_luma
from .report import EvalReport, EvalRow, emit_report, parse_csv, to_csv
