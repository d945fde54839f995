#!/usr/bin/env python3
"""
PTNN Toolkit - Main entry point

Usage examples:
    python -m ptnn_toolkit.main generate-toy --seed 42 --output toy.ptwt
    python -m ptnn_toolkit.main decompose --input toy.ptwt --layer embedding.weight --output embedding.pttt
    python -m ptnn_toolkit.main compress-model --input toy.ptwt --output run/
    python -m ptnn_toolkit.main individual --input toy.ptwt --layers embedding.weight
    python -m ptnn_toolkit.main report run/trace.jsonl
"""

import argparse
import asyncio
import hashlib
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import NoReturn
from urllib.parse import quote

from .errors import PtnnError, ShapeMismatch, UnfactorableVolume
from .metrics import ModelMetrics, layer_metrics, model_metrics, space_saving_histogram
from .model_store import (
    DEFAULT_N_CLASSES,
    DEFAULT_N_LAYERS,
    DEFAULT_N_SAMPLES,
    DEFAULT_NOISE_AMPLITUDE,
    DEFAULT_PLANTED_RANK,
    DEFAULT_SEQ_LEN,
    DEFAULT_VOCAB_SIZE,
    DEFAULT_WIDTH,
    ModelBundle,
    ToyOracle,
    evaluate,
    generate_toy_bundle,
    load_bundle,
    load_tt_checkpoint,
    save_bundle,
    save_tt_checkpoint,
)
from .models import IndividualLine, ModelSummaryOutput, ReconstructOutput, RunSummary, ToyBundleOutput, TraceLine
from .ptnn_engine import (
    DEFAULT_EPSILON,
    DEFAULT_MAX_WORKERS,
    DEFAULT_TOLERANCE,
    GateConfig,
    PTNNCompressor,
    checkpoint_param_count,
)
from .registry import RegistryManager
from .shaping import DEFAULT_D_TARGET, fold, plan_shape, unfold
from .tensor_core import DenseTensor, frobenius_norm
from .tt import relative_error, tt_reconstruct, tt_svd

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNFACTORABLE = 2

TRACE_FILE = "trace.jsonl"
BUNDLE_FILE = "bundle.ptwt"
CHECKPOINT_DIR = "checkpoints"


class PtnnArgumentParser(argparse.ArgumentParser):
    """參數錯誤以 EXIT_ERROR 結束 (exit 2 保留給無法張量化的層)"""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {number}")
    return number


def add_gate_flags(parser: argparse.ArgumentParser) -> None:
    """加入 TT-SVD / 閘門相關參數"""
    parser.add_argument(
        "--epsilon",
        type=float,
        default=DEFAULT_EPSILON,
        help=f"TT-SVD 相對誤差上限 (預設: {DEFAULT_EPSILON})"
    )
    parser.add_argument(
        "--d-target",
        type=int,
        default=DEFAULT_D_TARGET,
        help=f"張量化目標階數 (預設: {DEFAULT_D_TARGET})"
    )
    parser.add_argument(
        "--sigma-rule",
        choices=["paper", "strict", "standard"],
        default="paper",
        help="截斷門檻公式: paper (或 strict) = eps/(d-1), standard = eps/sqrt(d-1) (預設: paper)"
    )


def add_model_flags(parser: argparse.ArgumentParser) -> None:
    """加入逐層壓縮相關參數"""
    add_gate_flags(parser)
    parser.add_argument(
        "--tolerance",
        type=float,
        default=DEFAULT_TOLERANCE,
        help=f"可容許的準確率絕對下降量 (預設: {DEFAULT_TOLERANCE})"
    )
    parser.add_argument(
        "--layers",
        help="以逗號分隔的層名稱與處理順序 (預設: 全部層)"
    )
    parser.add_argument(
        "--keep-inflating",
        action="store_true",
        help="TT 參數量比原始矩陣多時仍送進準確率評估"
    )


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """解析命令列參數"""
    parser = PtnnArgumentParser(
        prog="ptnn",
        description="PTNN Toolkit - TT-SVD 權重壓縮與逐層準確率閘門",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )
    parser.add_argument(
        "--verbose",
        action="store_true",
        help="顯示除錯訊息"
    )
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    decompose = subparsers.add_parser("decompose", help="對單一層做 TT-SVD 並寫出 checkpoint")
    decompose.add_argument("--input", required=True, help="bundle 檔案路徑")
    decompose.add_argument("--layer", required=True, help="層名稱")
    decompose.add_argument("--output", required=True, help="checkpoint 輸出路徑")
    add_gate_flags(decompose)

    reconstruct = subparsers.add_parser("reconstruct", help="由 checkpoint 重建稠密權重")
    reconstruct.add_argument("--input", required=True, help="checkpoint 檔案路徑")
    reconstruct.add_argument("--output", required=True, help="輸出 bundle 路徑")
    reconstruct.add_argument("--bundle", help="要替換權重的 bundle (省略時輸出只含單一張量的 bundle)")
    reconstruct.add_argument("--layer", default="reconstructed.weight", help="層名稱 (預設: reconstructed.weight)")

    compress = subparsers.add_parser("compress-model", help="逐層累積壓縮 (準確率閘門)")
    compress.add_argument("--input", required=True, help="bundle 檔案路徑")
    compress.add_argument("--output", required=True, help="輸出資料夾")
    compress.add_argument("--db-path", help="紀錄執行結果的 SQLite 資料庫 (選用)")
    add_model_flags(compress)

    individual = subparsers.add_parser("individual", help="各層獨立壓縮研究")
    individual.add_argument("--input", required=True, help="bundle 檔案路徑")
    individual.add_argument("--output", help="輸出 JSON lines 檔案 (預設: stdout)")
    individual.add_argument("--workers", type=positive_int, default=DEFAULT_MAX_WORKERS, help=f"並行數, 至少 1 (預設: {DEFAULT_MAX_WORKERS})")
    add_model_flags(individual)

    toy = subparsers.add_parser("generate-toy", help="產生玩具 teacher 模型")
    toy.add_argument("--seed", type=int, default=42, help="隨機種子 (預設: 42)")
    toy.add_argument("--output", required=True, help="bundle 輸出路徑")
    toy.add_argument("--n-layers", type=int, default=DEFAULT_N_LAYERS, help=f"權重張量數 (預設: {DEFAULT_N_LAYERS})")
    toy.add_argument("--width", type=int, default=DEFAULT_WIDTH, help=f"隱藏層寬度 (預設: {DEFAULT_WIDTH})")
    toy.add_argument("--n-classes", type=int, default=DEFAULT_N_CLASSES, help=f"類別數 (預設: {DEFAULT_N_CLASSES})")
    toy.add_argument("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE, help=f"詞彙量 (預設: {DEFAULT_VOCAB_SIZE})")
    toy.add_argument("--seq-len", type=int, default=DEFAULT_SEQ_LEN, help=f"序列長度 (預設: {DEFAULT_SEQ_LEN})")
    toy.add_argument("--samples", type=int, default=DEFAULT_N_SAMPLES, help=f"評估樣本數 (預設: {DEFAULT_N_SAMPLES})")
    toy.add_argument("--noise", type=float, default=DEFAULT_NOISE_AMPLITUDE, help=f"雜訊幅度 (預設: {DEFAULT_NOISE_AMPLITUDE})")
    toy.add_argument("--planted-rank", type=int, default=DEFAULT_PLANTED_RANK, help=f"植入的 TT rank (預設: {DEFAULT_PLANTED_RANK})")
    toy.add_argument("--d-target", type=int, default=DEFAULT_D_TARGET, help=f"植入結構的目標階數 (預設: {DEFAULT_D_TARGET})")

    report = subparsers.add_parser("report", help="將 trace 轉為文字表格")
    report.add_argument("trace", help="trace.jsonl 路徑")
    report.add_argument("--input", help="原始 bundle (用於模型總參數量，選用)")

    stats = subparsers.add_parser("stats", help="顯示執行紀錄資料庫統計")
    stats.add_argument("--db-path", default="ptnn_runs.db", help="資料庫檔案路徑 (預設: ptnn_runs.db)")
    stats.add_argument("--runs", type=int, default=0, help="同時列出最近 N 筆執行紀錄")

    return parser.parse_args(argv)


def build_gate_config(args: argparse.Namespace) -> GateConfig:
    """由命令列參數建立 GateConfig"""
    return GateConfig(
        epsilon=args.epsilon,
        accuracy_drop_tolerance=args.tolerance,
        d_target=args.d_target,
        layer_order=[name.strip() for name in args.layers.split(",") if name.strip()] if args.layers else [],
        skip_inflating_layers=not args.keep_inflating,
        sigma_rule=args.sigma_rule,
    )


def require_toy_bundle(bundle: ModelBundle, path: str) -> None:
    """確認 bundle 帶有玩具模型描述 (否則沒有 oracle 可用)"""
    if bundle.architecture is None or bundle.dataset is None:
        raise ShapeMismatch(f"{path} has no toy architecture/dataset descriptor; no accuracy oracle available")


def cmd_decompose(args: argparse.Namespace) -> int:
    """對單一層做 TT-SVD，寫出 checkpoint 並輸出 LayerMetrics"""
    bundle = load_bundle(args.input)
    if args.layer not in bundle.weights:
        raise KeyError(f"layer {args.layer!r} not in {args.input}")

    matrix = bundle.matrix(args.layer)
    plan = plan_shape(matrix.shape[0], matrix.shape[1], args.d_target)
    tensor = fold(matrix, plan)
    cores = tt_svd(tensor, args.epsilon, args.sigma_rule)
    error = relative_error(tensor, tt_reconstruct(cores))
    save_tt_checkpoint(cores, plan, args.output)

    metrics = layer_metrics(args.layer, tensor.size, cores, error)
    logger.info(f"✅ {args.layer}: ranks {cores.ranks}, checkpoint written to {args.output}")
    print(metrics.model_dump_json())
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace) -> int:
    """由 checkpoint 重建稠密矩陣並寫入 bundle"""
    cores, plan = load_tt_checkpoint(args.input)
    matrix = unfold(tt_reconstruct(cores), plan)

    if args.bundle:
        base = load_bundle(args.bundle)
        if args.layer not in base.weights:
            raise KeyError(f"layer {args.layer!r} not in {args.bundle}")
        weight = DenseTensor(data=matrix.reshape(base.weights[args.layer].shape))
        bundle = base.with_weight(args.layer, weight)
    else:
        weight = DenseTensor(data=matrix)
        bundle = ModelBundle(weights={args.layer: weight})

    save_bundle(bundle, args.output)
    output = ReconstructOutput(
        path=str(args.output),
        layer=args.layer,
        shape=list(matrix.shape),
        ranks=list(cores.ranks),
        frobenius_norm=frobenius_norm(weight),
    )
    print(output.model_dump_json())
    return EXIT_OK


def trace_bytes(lines: list[TraceLine]) -> bytes:
    """trace.jsonl 內容 (一行一個 JSON 物件)"""
    return "".join(line.model_dump_json() + "\n" for line in lines).encode("utf-8")


def checkpoint_filename(layer: str) -> str:
    """層名稱轉為檔名 (percent-encoding，不同層名稱不會對應到同一檔案)"""
    return quote(layer, safe="") + ".pttt"


def cmd_compress_model(args: argparse.Namespace) -> int:
    """逐層累積壓縮，輸出 bundle、checkpoints 與 trace.jsonl"""
    bundle = load_bundle(args.input)
    require_toy_bundle(bundle, args.input)
    config = build_gate_config(args)
    outcome = PTNNCompressor(ToyOracle.for_teacher(bundle), config).run(bundle)

    lines = [TraceLine.from_record(record) for record in outcome.trace.records]
    payload = trace_bytes(lines)
    metrics = model_metrics([record.metrics for record in outcome.trace.records], bundle.total_params)

    output_dir = Path(args.output)
    output_dir.parent.mkdir(parents=True, exist_ok=True)
    # 先寫到暫存資料夾，全部成功後才搬到輸出位置
    staging = Path(tempfile.mkdtemp(prefix=".ptnn-", dir=output_dir.parent))
    try:
        save_bundle(outcome.bundle, staging / BUNDLE_FILE)
        (staging / CHECKPOINT_DIR).mkdir()
        for layer, checkpoint in outcome.checkpoints.items():
            save_tt_checkpoint(checkpoint.cores, checkpoint.plan, staging / CHECKPOINT_DIR / checkpoint_filename(layer))
        _ = (staging / TRACE_FILE).write_bytes(payload)

        output_dir.mkdir(exist_ok=True)
        if (output_dir / CHECKPOINT_DIR).exists():
            shutil.rmtree(output_dir / CHECKPOINT_DIR)
        for item in staging.iterdir():
            os.replace(item, output_dir / item.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)

    summary = ModelSummaryOutput(
        total_params=metrics.total_params,
        params_in_compressed_layers=metrics.params_in_compressed_layers,
        model_memory_fraction_saved=metrics.model_memory_fraction_saved,
        aggregate_space_saving=metrics.aggregate_space_saving,
        checkpoint_params=checkpoint_param_count(outcome, bundle),
        layers_compressed=len(outcome.checkpoints),
        layers_total=len(lines),
        original_accuracy=outcome.trace.original_accuracy,
        final_accuracy=outcome.trace.final_accuracy,
    )

    if args.db_path:
        registry = RegistryManager(args.db_path)
        try:
            _ = registry.save_run(
                RunSummary(
                    run_key=hashlib.sha256(payload + config.model_dump_json().encode("utf-8")).hexdigest(),
                    bundle_path=str(args.input),
                    epsilon=config.epsilon,
                    accuracy_drop_tolerance=config.accuracy_drop_tolerance,
                    d_target=config.d_target,
                    sigma_rule=config.sigma_rule,
                    original_accuracy=summary.original_accuracy,
                    final_accuracy=summary.final_accuracy,
                    model_memory_fraction_saved=summary.model_memory_fraction_saved,
                    aggregate_space_saving=summary.aggregate_space_saving,
                    layers=lines,
                )
            )
        finally:
            registry.close()

    print(summary.model_dump_json())
    return EXIT_OK


def cmd_individual(args: argparse.Namespace) -> int:
    """各層各自從原始 bundle 壓縮並評估"""
    bundle = load_bundle(args.input)
    require_toy_bundle(bundle, args.input)
    config = build_gate_config(args)
    compressor = PTNNCompressor(ToyOracle.for_teacher(bundle), config, max_workers=args.workers)
    traces = asyncio.run(compressor.individual_study(bundle, config.resolve_order(bundle)))

    text = "".join(
        IndividualLine.from_record(trace.records[0]).model_dump_json() + "\n" for trace in traces
    )
    if args.output:
        _ = Path(args.output).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_generate_toy(args: argparse.Namespace) -> int:
    """產生玩具 teacher bundle"""
    bundle, data = generate_toy_bundle(
        args.seed,
        args.n_layers,
        args.width,
        args.n_classes,
        vocab_size=args.vocab_size,
        seq_len=args.seq_len,
        n_samples=args.samples,
        noise_amplitude=args.noise,
        planted_rank=args.planted_rank,
        d_target=args.d_target,
    )
    save_bundle(bundle, args.output)
    output = ToyBundleOutput(
        path=str(args.output),
        seed=args.seed,
        tensors=len(bundle.weights),
        total_params=bundle.total_params,
        n_samples=int(data.labels.size),
        accuracy=evaluate(bundle, data),
    )
    print(output.model_dump_json())
    return EXIT_OK


def read_trace(path: str) -> list[TraceLine]:
    """
    讀取 trace.jsonl

    Args:
        path: 檔案路徑

    Returns:
        TraceLine 列表
    """
    text = Path(path).read_text(encoding="utf-8")
    return [TraceLine.model_validate_json(line) for line in text.splitlines() if line.strip()]


def render_report(lines: list[TraceLine], metrics: ModelMetrics) -> str:
    """
    產生對齊的文字表格

    Args:
        lines: trace 紀錄
        metrics: 模型層級指標

    Returns:
        表格文字
    """
    header = f"{'layer':<24} {'decision':<12} {'pre_acc':>8} {'post_acc':>8} {'saving':>8}  ranks"
    rows = [header, "-" * len(header)]
    for line in lines:
        rows.append(
            f"{line.layer:<24} {line.decision:<12} {line.pre_acc:>8.4f} {line.post_acc:>8.4f} "
            f"{line.space_saving:>8.3f}  {'-'.join(str(r) for r in line.ranks) or '-'}"
        )
    rows.append("-" * len(header))

    compressed = sum(1 for line in lines if line.decision == "compressed")
    final_accuracy = lines[-1].post_acc if lines else 0.0
    rows.append(
        f"aggregate: layers={len(lines)} compressed={compressed} "
        f"space_saving={metrics.aggregate_space_saving:.4f} "
        f"model_memory_fraction_saved={metrics.model_memory_fraction_saved:.4f} "
        f"final_accuracy={final_accuracy:.4f}"
    )

    histogram = space_saving_histogram([m for m in metrics.layers if m.gate_decision == "compressed"])
    rows.append("space saving distribution (compressed layers):")
    for i, count in enumerate(histogram):
        low, high = i / len(histogram), (i + 1) / len(histogram)
        rows.append(f"  [{low:.1f}, {high:.1f}{']' if i == len(histogram) - 1 else ')'} {'#' * count} {count}")
    return "\n".join(rows)


def cmd_report(args: argparse.Namespace) -> int:
    """將 trace.jsonl 轉為文字表格"""
    lines = read_trace(args.trace)
    layers = [line.to_layer_metrics() for line in lines]
    covered = sum(layer.original_params for layer in layers)
    total = load_bundle(args.input).total_params if args.input else max(covered, 1)
    print(render_report(lines, model_metrics(layers, total)))
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    """顯示執行紀錄資料庫統計"""
    registry = RegistryManager(args.db_path)
    try:
        print(registry.get_registry_stats().model_dump_json())
        for run in registry.list_runs(limit=args.runs) if args.runs > 0 else []:
            print(run.model_dump_json(exclude={"layers"}))
    finally:
        registry.close()
    return EXIT_OK


COMMANDS = {
    "decompose": cmd_decompose,
    "reconstruct": cmd_reconstruct,
    "compress-model": cmd_compress_model,
    "individual": cmd_individual,
    "generate-toy": cmd_generate_toy,
    "report": cmd_report,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    """主程式進入點"""
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )

    try:
        return COMMANDS[args.subcommand](args)
    except UnfactorableVolume as e:
        print(f"❌ 無法張量化: {e}", file=sys.stderr)
        return EXIT_UNFACTORABLE
    except KeyboardInterrupt:
        print("\n⚠️ 程式被使用者中斷", file=sys.stderr)
        return 130
    except (PtnnError, OSError, KeyError, ValueError) as e:
        print(f"❌ {args.subcommand} 失敗: {e}", file=sys.stderr)
        return EXIT_ERROR


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
