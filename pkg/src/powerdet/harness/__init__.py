"""Command line harness: data generation, training, evaluation, ablation, heatmaps, benchmarks."""
from .ablate import GROUPS, AblationRow, format_table, row_config, run_ablation
from .bench import bra_attention_macs, dense_attention_macs, run_bench
from .config import ConfigError, EvalConfig, RunConfig, TrainConfig, dump_config, load_config
from .heatmap import LAYER_TAGS, heatmap_from_activation, layer_activation, write_heatmap
from .reports import (
    REPORT_COLUMNS,
    TABLE_CLASS_ORDER,
    EvalReport,
    evaluate,
    read_csv,
    report_from_row,
    score,
    write_detections_jsonl,
    write_report,
)
from .train import load_checkpoint, save_checkpoint, train_from_config, train_model
