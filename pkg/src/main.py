"""
Group Re-ID 命令行入口

    python -m src.main ingest DATA
    python -m src.main synth OUT [--identities N --noise-sigma S --seed K ...]
    python -m src.main train DATA --checkpoint CKPT [--loss-log FILE --epochs N --grad-check ...]
    python -m src.main eval DATA --checkpoint CKPT --output RESULTS [--ablate]
    python -m src.main match DATA --checkpoint CKPT --probe GROUP_ID [--top-k 5]

每个子命令都接受 --config FILE（KEY=value 运行配置，键为长参数名去掉 -- 并把 - 换成 _）
优先级: 命令行参数 > 运行配置文件 > Config；默认运行配置文件路径取自环境变量 GROUPREID_CONFIG
退出码: 0 成功, 2 用法/配置错误, 3 数据错误, 4 数值错误, 5 文件缺失或不可读
"""

import argparse
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

import torch
from dotenv import dotenv_values
from loguru import logger

from src.analyzers.random_walk import make_scorer
from src.config import Config
from src.core.context import PipelineContext
from src.core.exceptions import (
    CheckpointError,
    ConfigurationError,
    DataError,
    NumericalError,
)
from src.models import PipelineFlags, ScorerConfig
from src.processors.feature_store import load_dataset, save_dataset, validate_dataset
from src.services.evaluator import (
    cmc,
    rank_all,
    resolve_n_max,
    run_ablation,
    split_views,
    write_results,
)
from src.services.synth import SynthConfig, generate
from src.services.trainer import TrainConfig, train
from src.storage.checkpoint import load_checkpoint, save_checkpoint
from src.storage.persistence import RunHistory
from src.utils.dataframe_helpers import (
    camera_totals,
    cmc_table,
    rank_frame,
    runs_frame,
    summarize_dataset,
    violations_frame,
)
from src.utils.logger import setup_logger

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_FILE = 5


def _parse_bool(raw: str) -> bool:
    value = str(raw).strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass(frozen=True)
class Option:
    name: str                        # argparse dest，也是运行配置文件中的键
    type: Callable[[str], Any]
    default: Callable[[], Any]
    help: str
    flag: bool = False               # --x / --no-x 开关


def _opt(name, type_, default, help_, flag=False) -> Option:
    return Option(name, type_, default if callable(default) else (lambda: default), help_, flag)


COMMON = [
    _opt('parts', int, lambda: Config.PART_COUNT, '身体部件数 P，必须整除特征维度'),
    _opt('seed', int, lambda: Config.SEED, '随机种子'),
    _opt('threads', int, lambda: Config.THREADS, '工作线程数（不影响结果）'),
]

PIPELINE = [
    _opt('rw', _parse_bool, lambda: Config.ENABLE_RW, '随机游走子图选择', flag=True),
    _opt('gm', _parse_bool, lambda: Config.ENABLE_GM, '图间注意力组匹配', flag=True),
    _opt('walk_steps', int, lambda: Config.WALK_STEPS, '游走迭代次数 t'),
    _opt('scorer', str, lambda: Config.SCORER_KIND, "亲和度打分器: cosine | bilinear"),
    _opt('n_max', int, lambda: Config.N_MAX, '图节点数上限，0 表示取最大组'),
    _opt('checkpoint', str, None, 'checkpoint 文件路径'),
    _opt('probe_camera', str, lambda: Config.PROBE_CAMERA, 'probe 视图相机'),
    _opt('gallery_camera', str, lambda: Config.GALLERY_CAMERA, 'gallery 视图相机'),
]

HISTORY = [
    _opt('history_db', str, lambda: Config.PERSIST_DB_PATH if Config.ENABLE_PERSISTENCE else None,
         '运行历史 SQLite 路径（可选）'),
]

COMMANDS: Dict[str, List[Option]] = {
    'ingest': [COMMON[0]],
    'synth': COMMON[:2] + [
        _opt('identities', int, lambda: Config.SYNTH_IDENTITIES, '身份数'),
        _opt('members_min', int, lambda: Config.SYNTH_MEMBERS_MIN, '每组最少成员数'),
        _opt('members_max', int, lambda: Config.SYNTH_MEMBERS_MAX, '每组最多成员数'),
        _opt('feature_dim', int, lambda: Config.SYNTH_FEATURE_DIM, '特征维度 D'),
        _opt('noise_sigma', float, lambda: Config.SYNTH_NOISE_SIGMA, '特征噪声 σ'),
        _opt('churn', int, lambda: Config.SYNTH_CHURN, '两个视图之间替换的成员数'),
        _opt('distractors', int, lambda: Config.SYNTH_DISTRACTORS, 'probe 视图中的干扰者数'),
    ],
    'train': COMMON + PIPELINE[:6] + HISTORY + [
        _opt('cl', _parse_bool, lambda: Config.ENABLE_CL, 'circle loss（关闭时用成对 margin loss）', flag=True),
        _opt('loss_log', str, None, '每个 epoch 一行的 loss 日志，默认 CHECKPOINT.loss.tsv'),
        _opt('learning_rate', float, lambda: Config.LEARNING_RATE, '学习率'),
        _opt('epochs', int, lambda: Config.EPOCHS, '训练轮数'),
        _opt('batch_pairs', int, lambda: Config.BATCH_PAIRS, '每步正样本对数'),
        _opt('rounds', int, lambda: Config.MATCH_ROUNDS, '消息传递轮数 T'),
        _opt('embed_dim', int, lambda: Config.EMBED_DIM, '图嵌入维度，0 表示 P*D_p'),
        _opt('init', str, lambda: Config.MATCH_INIT, "参数起点: uniform | passthrough（从成员均值相似度起步）"),
        _opt('gamma', float, lambda: Config.CIRCLE_GAMMA, 'circle loss 尺度 γ'),
        _opt('weight_pos', float, lambda: Config.CIRCLE_WEIGHT_POS, '正样本权重'),
        _opt('weight_neg', float, lambda: Config.CIRCLE_WEIGHT_NEG, '负样本权重'),
        _opt('margin', float, lambda: Config.CONTRASTIVE_MARGIN, '关闭 CL 时的 margin'),
        _opt('affinity_weight', float, lambda: Config.AFFINITY_LOSS_WEIGHT, '双线性打分器 BCE 权重'),
        _opt('grad_check', _parse_bool, False, '训练前做梯度检查，误差超过阈值则失败', flag=True),
        _opt('probe_camera', str, lambda: Config.PROBE_CAMERA, 'probe 视图相机'),
    ],
    'eval': COMMON + PIPELINE + HISTORY + [
        _opt('output', str, 'results.tsv', '结果文件路径'),
        _opt('ablate', _parse_bool, False, '输出 Base / +RW / +GM / +RW+GM 消融', flag=True),
        _opt('per_probe', _parse_bool, False, '打印每个 probe 的正确排名与第一名', flag=True),
    ],
    'match': COMMON + PIPELINE + [
        _opt('probe', str, None, 'probe 组的 group_id'),
        _opt('top_k', int, lambda: Config.MATCH_TOP_K, '输出前 k 个 gallery'),
    ],
}

POSITIONAL = {
    'ingest': ('dataset', '特征文件'),
    'synth': ('output_path', '输出的特征文件'),
    'train': ('dataset', '训练特征文件'),
    'eval': ('dataset', '评估特征文件'),
    'match': ('dataset', '特征文件'),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='group-reid', description='基于随机游走与图间注意力的群组重识别')
    sub = parser.add_subparsers(dest='command', required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        pos, pos_help = POSITIONAL[name]
        p.add_argument(pos, help=pos_help)
        p.add_argument('--config', default=None,
                       help=f'运行配置文件 (KEY=value)，默认取环境变量 {Config.CONFIG_ENV_VAR}')
        for opt in options:
            flag = '--' + opt.name.replace('_', '-')
            if opt.flag:
                p.add_argument(flag, dest=opt.name, default=None,
                               action=argparse.BooleanOptionalAction, help=opt.help)
            else:
                p.add_argument(flag, dest=opt.name, default=None, type=opt.type, help=opt.help)
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> argparse.Namespace:
    """
    合并命令行参数、运行配置文件和 Config 默认值

    Raises:
        ConfigurationError: 运行配置文件中有未知键或非法取值
        FileNotFoundError: 运行配置文件不存在
    """
    options = {opt.name: opt for opt in COMMANDS[command]}
    path = args.config or os.getenv(Config.CONFIG_ENV_VAR)
    file_values: Dict[str, Optional[str]] = {}
    if path:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"run config not found: {path}")
        file_values = dict(dotenv_values(path))
        for key in file_values:
            if key.lower() not in options:
                raise ConfigurationError(f"unknown config key {key!r} for command {command!r}")
        logger.debug(f"运行配置文件 {path}: {sorted(file_values)}")

    lowered = {k.lower(): v for k, v in file_values.items()}
    for name, opt in options.items():
        if getattr(args, name) is not None:
            continue
        if name in lowered and lowered[name] is not None:
            try:
                value = opt.type(lowered[name])
            except ValueError as e:
                raise ConfigurationError(f"bad value for config key {name!r}: {e}") from None
        else:
            value = opt.default()
        setattr(args, name, value)
    return args


def _history(args: argparse.Namespace) -> Optional[RunHistory]:
    return RunHistory(args.history_db) if getattr(args, 'history_db', None) else None


# ==================== 子命令 ====================

def cmd_ingest(args: argparse.Namespace) -> int:
    manifest = load_dataset(args.dataset, args.parts)
    violations = validate_dataset(manifest)
    summary = summarize_dataset(manifest)

    print(f"dataset: {args.dataset}")
    print(f"group views: {len(manifest.groups)}  identities: {len(manifest.identities())}  "
          f"D={manifest.feature_dim}  P={manifest.part_count}")
    print(camera_totals(summary).to_string())
    print(summary.to_string(index=False))
    if violations:
        print(f"violations: {len(violations)}")
        print(violations_frame(violations).to_string(index=False))
        logger.error(f"❌ 数据集有 {len(violations)} 处违例")
        return EXIT_DATA
    logger.success("✅ 数据集校验通过")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    config = SynthConfig(
        n_identities=args.identities,
        members_min=args.members_min,
        members_max=args.members_max,
        feature_dim=args.feature_dim,
        noise_sigma=args.noise_sigma,
        churn_count=args.churn,
        distractor_count=args.distractors,
        seed=args.seed,
        part_count=args.parts,
    )
    manifest = generate(config)
    save_dataset(manifest, args.output_path)
    print(f"wrote {len(manifest.groups)} group views to {args.output_path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    if not args.checkpoint:
        raise ConfigurationError("train needs --checkpoint")
    manifest = load_dataset(args.dataset, args.parts)
    config = TrainConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_pairs=args.batch_pairs,
        seed=args.seed,
        flags=PipelineFlags(rw=args.rw, gm=args.gm, cl=args.cl),
        walk_steps=args.walk_steps,
        scorer_kind=args.scorer,
        affinity_loss_weight=args.affinity_weight,
        margin=args.margin,
        n_max=args.n_max,
        rounds=args.rounds,
        embed_dim=args.embed_dim,
        gamma=args.gamma,
        weight_pos=args.weight_pos,
        weight_neg=args.weight_neg,
        grad_check=args.grad_check,
        probe_camera=args.probe_camera,
        init=args.init,
    )
    report = train(manifest, config)
    if report.grad_check_error is not None:
        print(f"max relative gradient error: {report.grad_check_error:.3e} "
              f"({report.grad_check_skipped} kink entries skipped)")

    meta = {
        'feature_dim': manifest.feature_dim,
        'n_max': report.n_max,
        'walk_steps': args.walk_steps,
        'epochs': args.epochs,
        'learning_rate': args.learning_rate,
        'seed': args.seed,
        'init': args.init,
        'flags': {'rw': args.rw, 'gm': args.gm, 'cl': args.cl},
    }
    save_checkpoint(args.checkpoint, report.params, report.scorer.to_config(), meta)

    loss_log = args.loss_log or f"{args.checkpoint}.loss.tsv"
    with open(loss_log, 'w', encoding='utf-8', newline='\n') as f:
        for epoch, loss in enumerate(report.losses, start=1):
            f.write(f"{epoch}\t{loss!r}\n")
    print(f"checkpoint: {args.checkpoint}  loss log: {loss_log}  final loss: {report.losses[-1]:.6f}")

    history = _history(args)
    if history is not None:
        history.save_train_run(args.dataset, args.checkpoint, args.epochs, report.steps,
                               report.losses[-1], report.grad_check_error, meta)
        history.close()
    return EXIT_OK


def _pipeline(args: argparse.Namespace, need_params: bool):
    """加载数据集与 checkpoint，建图并构造 PipelineContext"""
    params, scorer_config = None, ScorerConfig(kind=args.scorer)
    part_count = args.parts
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        params, scorer_config = ckpt.params, ckpt.scorer
        if args.parts != ckpt.params.part_count:
            logger.info(f"使用 checkpoint 的部件数 P={ckpt.params.part_count}")
            part_count = ckpt.params.part_count
    elif need_params:
        raise FileNotFoundError("GM stage is enabled but no checkpoint was given (--checkpoint)")

    manifest = load_dataset(args.dataset, part_count)
    n_max = resolve_n_max(manifest, args.n_max)
    probes, gallery = split_views(manifest, n_max, args.probe_camera, args.gallery_camera)
    ctx = PipelineContext(
        scorer=make_scorer(scorer_config, manifest.feature_dim),
        params=params,
        flags=PipelineFlags(rw=args.rw, gm=args.gm),
        walk_steps=args.walk_steps,
        threads=args.threads,
    )
    return probes, gallery, ctx


def cmd_eval(args: argparse.Namespace) -> int:
    probes, gallery, ctx = _pipeline(args, need_params=args.gm or args.ablate)

    if args.ablate:
        report = run_ablation(probes, gallery, ctx)
        sections = [(label, results, curve) for label, (results, curve) in report.items()]
    else:
        results = rank_all(probes, gallery, ctx)
        sections = [(ctx.flags.label, results, cmc(results))]

    write_results(args.output, sections)
    print(cmc_table({label: curve for label, _, curve in sections}).to_string())
    if args.per_probe:
        for label, results, _ in sections:
            print(f"\n[{label}]")
            print(rank_frame(results).to_string(index=False))

    history = _history(args)
    if history is not None:
        for label, _, curve in sections:
            history.save_eval_run(args.dataset, label, curve)
        print(f"\nhistory ({args.history_db}):")
        print(runs_frame(history.eval_runs()).to_string(index=False))
        history.close()
    return EXIT_OK


def cmd_match(args: argparse.Namespace) -> int:
    if not args.probe:
        raise ConfigurationError("match needs --probe GROUP_ID")
    if args.top_k < 1:
        raise ConfigurationError(f"top_k must be positive, got {args.top_k}")
    probes, gallery, ctx = _pipeline(args, need_params=args.gm)
    chosen = [p for p in probes if p.group_id == args.probe]
    if not chosen:
        raise DataError(f"probe group {args.probe!r} not found in camera {args.probe_camera!r}")

    result = rank_all(chosen, gallery, ctx)[0]
    print(f"probe {result.probe_id} ({ctx.flags.label}), correct rank: "
          f"{result.correct_rank if result.correct_rank is not None else '-'}")
    for rank, (gid, score) in enumerate(zip(result.gallery_ids[:args.top_k], result.scores), start=1):
        print(f"{rank}\t{gid}\t{score:.6f}")
    return EXIT_OK


HANDLERS = {
    'ingest': cmd_ingest,
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'match': cmd_match,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if not e.code else EXIT_USAGE

    # 固定 torch 线程数，结果与 --threads 无关
    torch.set_num_threads(1)

    try:
        args = resolve_options(args.command, args)
        threads = getattr(args, 'threads', 1)
        if threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {threads}")
        return HANDLERS[args.command](args)
    except ConfigurationError as e:
        logger.error(f"❌ 配置错误: {e}")
        return EXIT_USAGE
    except DataError as e:
        logger.error(f"❌ 数据错误: {e}")
        return EXIT_DATA
    except NumericalError as e:
        logger.error(f"❌ 数值错误: {e}")
        return EXIT_NUMERICAL
    except (CheckpointError, OSError) as e:
        if isinstance(e, FileNotFoundError):
            logger.error(f"❌ 文件不存在 (not found): {e}")
        else:
            logger.error(f"❌ 文件不可读: {e}")
        return EXIT_FILE
    except UnicodeDecodeError as e:
        logger.error(f"❌ 数据错误: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    setup_logger()
    sys.exit(main())
