# app/api/main.py

"""
================================================================================
 API端点手册 (app/api/main.py)
================================================================================

致API使用者：

这个文件是API服务器的入口点。它使用FastAPI框架定义所有HTTP端点，计算逻辑
与命令行共用 `app.pipeline`。

交互式文档 (Swagger UI):
1. 运行后端服务器: `uvicorn app.api.main:app`。
2. 在浏览器中打开 http://127.0.0.1:8000/docs。

核心端点:
- **`POST /simulate`**: 按预设或完整配置生成数据集并划分，返回各份的摘要
  (`SimulateResponse`)。数据本身不随响应返回，需要文件时请使用命令行。
- **`POST /evaluate`**: 对服务器本地的检查点目录和数据集文件做评估，返回
  `EvaluationReport`，字段与命令行写出的 report.json 一致。

错误响应:
- **HTTP 422**: 配置非法、数组维度不符、超出枚举容量、指标不适用。
- **HTTP 400**: 数据文件损坏、检查点与数据集不兼容。
- **HTTP 500**: 数值错误（非有限梯度、后验塌缩、模拟发散）。
"""
import logging

from fastapi import FastAPI, HTTPException

from app import pipeline
from app.config import apply_overrides, default_config, validate_config
from app.data.storage import load_dataset
from app.errors import ConfigError, DataError, RelationalInferenceError
from app.inference.store import load_checkpoint
from .schemas import EvaluateRequest, EvaluationReport, SimulateRequest, SimulateResponse

logger = logging.getLogger(__name__)

app = FastAPI(
    title="集体关系推断服务 (Collective Relational Inference)",
    description="生成相互作用粒子系统的轨迹数据，并用 CRI / Var-CRI / Evolving-CRI 检查点推断边类型、计算评估指标。",
    version="1.0.0",
)


def _http_error(exc: RelationalInferenceError) -> HTTPException:
    if isinstance(exc, ConfigError):
        status = 422
    elif isinstance(exc, DataError):
        status = 400
    else:
        status = 500
    logger.warning("请求失败 (%d): %s: %s", status, type(exc).__name__, exc)
    return HTTPException(status_code=status, detail=f"{type(exc).__name__}: {exc}")


@app.post("/simulate", response_model=SimulateResponse, tags=["Data"])
def simulate(request: SimulateRequest):
    """
    生成一组模拟并按配置划分为 train / valid / test。

    **请求体**: `SimulateRequest`，`preset` 或 `config` 至少给出一个。

    **成功响应 (HTTP 200)**: `SimulateResponse`，每份数据给出形状与文件字节的
    SHA-256；同一请求重复发送得到相同的哈希。
    """
    try:
        if request.config is not None:
            config = validate_config({**request.config, "seed": request.seed})
        elif request.preset is not None:
            config = default_config(request.preset, request.seed)
        else:
            raise ConfigError("请求中需要 preset 或 config")
        config = apply_overrides(config, request.overrides)
        result = pipeline.simulate_datasets(config)
    except RelationalInferenceError as exc:
        raise _http_error(exc)
    return SimulateResponse(
        kind=config.system.kind.value,
        seed=config.seed,
        splits=[pipeline.summarize(name, ds) for name, ds in result.splits.items()],
        noise_level=result.noise_level,
    )


@app.post("/evaluate", response_model=EvaluationReport, tags=["Evaluation"])
def evaluate(request: EvaluateRequest):
    """
    在数据集上用检查点推断边类型并计算全部适用的指标。

    **成功响应 (HTTP 200)**: `EvaluationReport`。不适用的指标为 null，
    原因见 `null_reasons`。
    """
    try:
        ckpt = load_checkpoint(request.checkpoint)
        dataset = load_dataset(request.dataset)
        report, _ = pipeline.evaluate(ckpt, dataset, request.horizons)
    except RelationalInferenceError as exc:
        raise _http_error(exc)
    return report


@app.get("/", include_in_schema=False)
def root():
    """根路径，用于简单的健康检查或服务发现。"""
    return {"message": "关系推断API正在运行。请访问 /docs 查看API文档。"}
