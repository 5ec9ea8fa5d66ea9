# app/cli.py

"""
================================================================================
 命令行入口 (app/cli.py)
================================================================================

    python -m app simulate      --config cfg.json --out data/
    python -m app train         --config cfg.json --data data/ --out ckpt/ [--resume ckpt/]
    python -m app evaluate      --checkpoint ckpt/best --dataset data/test.bin --out report/
    python -m app export-forces --checkpoint ckpt/best --out forces.csv [--extent 3 --resolution 101]
    python -m app inject-noise  --dataset data/train.bin --beta 1e-5 --seed 0 --out noisy.bin
    python -m app export-csv    --dataset data/train.bin --block positions --out positions.csv
    python -m app aggregate     --reports a/report.json b/report.json --out summary.csv

`--config` 也可以是之前某次运行写出的 manifest.json；`--set a.b=v` 覆盖单个
配置项。每次运行在输出目录写 manifest.json（配置、种子、输入与产物的
SHA-256），并把它打印到标准输出。

退出码: 0 成功, 2 配置错误, 3 数据错误, 4 数值错误。
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from app import pipeline
from app.api.schemas import Manifest
from app.config import ExperimentConfig, apply_overrides, load_config
from app.data.dataset import TrajectoryDataset
from app.data.storage import BLOCKS, export_block_csv, load_dataset, save_dataset
from app.decoder.forces import export_force_field
from app.errors import ConfigError, DataError, RelationalInferenceError
from app.inference import evolving, store, trainer
from app.metrics.evaluation import aggregate_reports, edge_frame
from app.metrics.report import EvaluationReport
from app.physics.noise import inject_noise

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATASET_FILES = {name: f"{name}.bin" for name in ("train", "valid", "test")}


def _file_hashes(paths: Iterable[Path], root: Optional[Path] = None) -> Dict[str, str]:
    out = {}
    for path in sorted(Path(p) for p in paths):
        key = str(path.relative_to(root)) if root is not None else str(path)
        out[key] = pipeline.sha256_hex(path.read_bytes())
    return out


def _write_manifest(out_dir: Path, command: str, config: ExperimentConfig, artifacts: List[Path],
                    inputs: Iterable[Path] = (), name: str = "manifest.json") -> Manifest:
    manifest = Manifest(
        command=command,
        seed=config.seed,
        config=config.model_dump(mode="json"),
        inputs=_file_hashes(inputs),
        artifacts=_file_hashes(artifacts, out_dir),
    )
    text = json.dumps(manifest.model_dump(mode="json"), sort_keys=True, indent=2)
    (out_dir / name).write_text(text + "\n", encoding="utf-8")
    print(text)
    return manifest


def _config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("需要 --config 配置文件")
    return apply_overrides(load_config(args.config), args.set or [])


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ==============================================================================
# 子命令
# ==============================================================================

def cmd_simulate(args) -> None:
    config = _config(args)
    out = Path(args.out)
    result = pipeline.simulate_datasets(config)
    artifacts = []
    for name, ds in result.splits.items():
        path = out / DATASET_FILES[name]
        save_dataset(ds, path)
        artifacts.append(path)
    if result.teacher is not None:
        files = store.save_checkpoint(pipeline.teacher_checkpoint(config, result.teacher), out / "teacher")
        artifacts.extend(files.values())
    if result.noise_level is not None:
        path = out / "noise.json"
        _write_json(path, {"beta": config.dataset.noise_beta, "noise_level": result.noise_level})
        artifacts.append(path)
    _write_manifest(out, "simulate", config, artifacts)


def _load_split(data_dir: Path, name: str, required: bool) -> Optional[TrajectoryDataset]:
    path = data_dir / DATASET_FILES[name]
    if not path.is_file():
        if required:
            raise DataError(f"{data_dir} 中没有 {DATASET_FILES[name]}")
        return None
    return load_dataset(path)


def cmd_train(args) -> None:
    config = _config(args)
    data_dir, out = Path(args.data), Path(args.out)
    train = _load_split(data_dir, "train", required=True)
    valid = _load_split(data_dir, "valid", required=False)
    resume = resume_best = None
    if args.resume is not None:
        resume = store.load_checkpoint(args.resume)
        if (Path(args.resume) / "best").is_dir():
            resume_best = store.load_checkpoint(Path(args.resume) / "best")
    result = trainer.fit(config, train, valid, resume=resume, resume_best=resume_best)
    files = list(store.save_checkpoint(result.last, out).values())
    files += list(store.save_checkpoint(result.best, out / "best").values())
    inputs = [data_dir / DATASET_FILES["train"]] + ([data_dir / DATASET_FILES["valid"]] if valid is not None else [])
    _write_manifest(out, "train", config, files, inputs)


def cmd_evaluate(args) -> None:
    ckpt = store.load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, types = pipeline.evaluate(ckpt, dataset, args.horizons)
    report_path, edges_path = out / "report.json", out / "edges.csv"
    _write_json(report_path, report.model_dump(mode="json"))
    edge_frame(types, dataset.edge_types, report.permutation).to_csv(edges_path, index=False)
    artifacts = [report_path, edges_path]
    if ckpt.method == "evolving-cri":
        ctx = evolving.prepare(dataset, ckpt.config, ckpt.bank.n_types)
        state = evolving.induction_pass(evolving.EvolvingState(ckpt.bank, ckpt.priors, ()), ctx)
        path = out / "marginals.csv"
        evolving.write_marginals_csv(state, ctx, path)
        artifacts.append(path)
    _write_manifest(out, "evaluate", ckpt.config, artifacts, [Path(args.dataset)])


def _feature_layout(node_width: int, dims: int) -> str:
    layouts = {2 * dims + 1: "position_velocity_mass", 2 * dims: "position_velocity", dims: "value"}
    if node_width not in layouts:
        raise ConfigError(f"无法由节点特征宽度 {node_width} 推断特征布局")
    return layouts[node_width]


def cmd_export_forces(args) -> None:
    ckpt = store.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    layout = _feature_layout(ckpt.bank.node_width, ckpt.bank.dims)
    rows = export_force_field(ckpt.bank, out, args.extent, args.resolution, layout)
    logger.info("力场已写出: %s (%d 行)", out, rows)
    _write_manifest(out.parent, "export-forces", ckpt.config, [out], name=f"{out.stem}.manifest.json")


def cmd_inject_noise(args) -> None:
    dataset = load_dataset(args.dataset)
    noisy, level = inject_noise(dataset, args.beta, args.seed)
    out = Path(args.out)
    save_dataset(noisy, out)
    print(json.dumps({"beta": args.beta, "noise_level": level, "sha256": pipeline.sha256_hex(out.read_bytes())},
                     sort_keys=True))


def cmd_export_csv(args) -> None:
    export_block_csv(load_dataset(args.dataset), args.block, Path(args.out))


def cmd_aggregate(args) -> None:
    reports = []
    for path in args.reports:
        try:
            reports.append(EvaluationReport.model_validate_json(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise DataError(f"无法读取评估报告 {path}: {exc}") from exc
    frame = aggregate_reports(reports)
    frame.to_csv(args.out, index=False, float_format="%.17g")
    print(frame.to_string(index=False))


# ==============================================================================
# 参数解析
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app", description="集体关系推断 (CRI / Var-CRI / Evolving-CRI)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, help="实验配置 JSON 或 manifest.json")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="覆盖配置项，可重复")
        return p

    p = with_config(sub.add_parser("simulate", help="生成并划分数据集"))
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = with_config(sub.add_parser("train", help="训练并保存检查点"))
    p.add_argument("--data", type=Path, required=True, help="包含 train.bin / valid.bin 的目录")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="从该检查点目录续训")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="在数据集上评估检查点")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--horizons", type=int, nargs="+", help="滚动预测步长，缺省取配置中的 rollout_horizons")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-forces", help="导出边网络的力场 CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--extent", type=float, default=3.0)
    p.add_argument("--resolution", type=int, default=101)
    p.set_defaults(func=cmd_export_forces)

    p = sub.add_parser("inject-noise", help="向数据集的位置注入高斯噪声")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("export-csv", help="把数据集的一块导出为 CSV")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--block", choices=BLOCKS, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export_csv)

    p = sub.add_parser("aggregate", help="汇总多个评估报告的均值与标准差")
    p.add_argument("--reports", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        args.func(args)
    except RelationalInferenceError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
