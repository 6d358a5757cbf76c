"""
heightmap-eds 图表输出（plotly 独立 HTML 文件）
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import pandas as pd
import plotly.express as px

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def write_loss_curves(path: PathLike, history: List[Dict[str, Any]], columns: Sequence[str],
                      title: str = "Loss curves"):
    """按 epoch 绘制若干列的折线图"""
    df = pd.DataFrame(history)
    present = [c for c in columns if c in df.columns]
    if df.empty or not present:
        logger.warning(f"没有可绘制的数据: {path}")
        return
    long = df.melt(id_vars="epoch", value_vars=present, var_name="series", value_name="value")
    fig = px.line(long, x="epoch", y="value", color="series", title=title, markers=True)
    fig.update_yaxes(type="log")
    _write(fig, path)


def write_heatmap(path: PathLike, grid: np.ndarray, title: str, x_label: str = "y index",
                  y_label: str = "x index"):
    """二维误差/高程网格热力图"""
    fig = px.imshow(np.asarray(grid), title=title, color_continuous_scale="Viridis",
                    labels={"x": x_label, "y": y_label, "color": "m"}, origin="lower")
    _write(fig, path)


def write_profile(path: PathLike, xs: np.ndarray, series: Dict[str, np.ndarray], title: str):
    """纵向剖面：多条曲线共享 x 轴"""
    df = pd.DataFrame({"x": xs, **series})
    long = df.melt(id_vars="x", var_name="series", value_name="height")
    fig = px.line(long, x="x", y="height", color="series", title=title, markers=True)
    _write(fig, path)


def _write(fig, path: PathLike):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs="cdn")
    logger.debug(f"图表已写出: {path}")
