#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
감사 결과 시각화 (PNG)

- Δc vs 비섭동 재구성 손실 산점도 (β 별 색상)
- 하위집단별 / 보호 속성별 Δc 박스플롯 + 하위집단 크기 패널
- 잠재 임베딩 지도, 끌림 효과 지도
- 학습 손실 곡선
"""

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.font_manager as fm
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from .dataio import SubgroupKey

warnings.filterwarnings("ignore", category=UserWarning, module="matplotlib")

KOREAN_FONTS = ["Malgun Gothic", "AppleGothic", "NanumGothic", "Noto Sans CJK KR", "Noto Sans KR"]
DPI = 300

_font_ready = False


def setup_korean_font():
    """사용 가능한 한글 폰트 설정 (없으면 기본 폰트)"""
    global _font_ready
    if _font_ready:
        return plt.rcParams["font.family"]

    available = {font.name for font in fm.fontManager.ttflist}
    chosen = next((name for name in KOREAN_FONTS if name in available), None)
    if chosen:
        plt.rcParams["font.family"] = chosen
    else:
        plt.rcParams["font.family"] = "DejaVu Sans"
        print("⚠️ 한글 폰트를 찾지 못해 기본 폰트를 사용합니다.")
    plt.rcParams["axes.unicode_minus"] = False
    sns.set_palette("husl")
    _font_ready = True
    return plt.rcParams["font.family"]


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    print(f"💾 그래프 저장: {path}")
    return path


def _label_map(group_labels):
    return lambda name: SubgroupKey.from_name(name).label(group_labels)


def _empty_figure(path, message):
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.text(0.5, 0.5, message, ha="center", va="center", fontsize=12, fontweight="bold")
    ax.set_axis_off()
    return _save(fig, path)


# =============================================================================
# 강건성 그래프
# =============================================================================

def plot_deviation_scatter(frame, path, group_labels=None):
    """비섭동 재구성 손실(x) vs Δc(y), 색상 = β, 모양 = 하위집단"""
    setup_korean_font()
    data = frame[frame["status"] == "ok"].copy()
    if data.empty:
        return _empty_figure(path, "기록 없음")
    data["하위집단"] = data["subgroup"].map(_label_map(group_labels))
    data["β"] = data["beta"].map(lambda beta: f"β={beta:g}")

    fig, ax = plt.subplots(figsize=(12, 8))
    sns.scatterplot(data=data, x="recon_loss", y="deviation", hue="β", style="하위집단", s=60, alpha=0.7,
                    edgecolor="black", linewidth=0.3, ax=ax)
    ax.axhline(0.2, color="red", linestyle="--", linewidth=1.5, alpha=0.8)
    ax.text(ax.get_xlim()[1], 0.2, " Δc = 0.2", color="red", va="bottom", ha="right", fontsize=9,
            fontweight="bold")
    ax.set_title("적대적 편차 vs 비섭동 재구성 손실", fontsize=16, fontweight="bold", pad=20)
    ax.set_xlabel("재구성 손실 (픽셀 평균 MSE)", fontsize=12, fontweight="bold")
    ax.set_ylabel("적대적 편차 Δc (L2)", fontsize=12, fontweight="bold")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_subgroup_boxes(frame, cardinalities, path, group_labels=None):
    """β 별 하위집단 Δc 박스플롯 + 하위집단 크기 막대"""
    setup_korean_font()
    data = frame[frame["status"] == "ok"].copy()
    if data.empty:
        return _empty_figure(path, "기록 없음")
    label = _label_map(group_labels)
    data["하위집단"] = data["subgroup"].map(label)
    data["β"] = data["beta"].map(lambda beta: f"β={beta:g}")
    order = [label(name) for name in sorted(data["subgroup"].unique())]

    fig, (ax, ax_count) = plt.subplots(1, 2, figsize=(16, 7), gridspec_kw={"width_ratios": [3, 1]})
    sns.boxplot(data=data, x="하위집단", y="deviation", hue="β", order=order, whis=(0, 100), ax=ax)
    ax.set_title("하위집단별 적대적 편차 분포", fontsize=16, fontweight="bold", pad=20)
    ax.set_xlabel("하위집단", fontsize=12, fontweight="bold")
    ax.set_ylabel("Δc", fontsize=12, fontweight="bold")
    ax.tick_params(axis="x", rotation=30)
    ax.grid(True, alpha=0.3, axis="y")

    counts = cardinalities.copy()
    counts["하위집단"] = counts["subgroup"].map(label)
    sns.barplot(data=counts, x="count", y="하위집단", color="steelblue", ax=ax_count)
    for index, (count, share) in enumerate(zip(counts["count"], counts["share"])):
        ax_count.text(count, index, f" {count:,}개 ({share:.1%})", va="center", fontsize=9,
                      fontweight="bold")
    ax_count.set_title("하위집단 크기", fontsize=14, fontweight="bold")
    ax_count.set_xlabel("샘플 수", fontsize=12, fontweight="bold")
    ax_count.set_ylabel("")
    ax_count.grid(True, alpha=0.3, axis="x")
    return _save(fig, path)


def plot_marginal_boxes(frame, attribute, path, group_labels=None):
    """보호 속성 하나로 주변화한 그룹별 Δc 박스플롯 (그룹 크기 표시)"""
    setup_korean_font()
    data = frame[frame["status"] == "ok"].copy()
    if data.empty:
        return _empty_figure(path, "기록 없음")
    data["그룹"] = data["subgroup"].map(
        lambda name: SubgroupKey.from_name(name).restrict(attribute).label(group_labels)
    )
    data["β"] = data["beta"].map(lambda beta: f"β={beta:g}")

    order = sorted(data["그룹"].unique())
    fig, ax = plt.subplots(figsize=(10, 7))
    sns.boxplot(data=data, x="그룹", y="deviation", hue="β", order=order, whis=(0, 100), ax=ax)
    sizes = data.groupby("그룹")["id"].nunique()
    for index, group in enumerate(order):
        ax.text(index, ax.get_ylim()[1], f"n={sizes[group]:,}", ha="center", va="top", fontsize=10,
                fontweight="bold")
    ax.set_title(f"{attribute} 기준 적대적 편차 분포", fontsize=16, fontweight="bold", pad=20)
    ax.set_xlabel(attribute, fontsize=12, fontweight="bold")
    ax.set_ylabel("Δc", fontsize=12, fontweight="bold")
    ax.grid(True, alpha=0.3, axis="y")
    return _save(fig, path)


# =============================================================================
# 잠재 공간 그래프
# =============================================================================

def plot_embedding_map(projection_frame, path, deviations=None, group_labels=None, title="잠재 임베딩 (2D 투영)"):
    """하위집단별 색상의 2D 임베딩 지도 (Δc 가 있으면 점 크기로 표시)"""
    setup_korean_font()
    data = projection_frame.copy()
    data["하위집단"] = data["subgroup"].map(_label_map(group_labels))
    fig, ax = plt.subplots(figsize=(10, 8))
    sizes = None
    if deviations is not None:
        # 평가 샘플이 아닌 점은 최소 크기
        data["Δc"] = data["id"].map(deviations).fillna(0.0)
        sizes = "Δc"
    sns.scatterplot(data=data, x="x", y="y", hue="하위집단", size=sizes, sizes=(20, 200), alpha=0.7,
                    edgecolor="black", linewidth=0.3, ax=ax)
    ax.set_title(title, fontsize=16, fontweight="bold", pad=20)
    ax.set_xlabel("성분 1", fontsize=12, fontweight="bold")
    ax.set_ylabel("성분 2", fontsize=12, fontweight="bold")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_pull_map(projection, projection_frame, pull_records, path, group_labels=None):
    """원본 → 적대적 임베딩 이동 화살표 (PCA 좌표계)"""
    setup_korean_font()
    data = projection_frame.copy()
    data["하위집단"] = data["subgroup"].map(_label_map(group_labels))
    fig, ax = plt.subplots(figsize=(10, 8))
    sns.scatterplot(data=data, x="x", y="y", hue="하위집단", alpha=0.35, s=25, ax=ax)
    for record in pull_records:
        start, end = projection.transform(np.stack([record.clean_embedding, record.adversarial_embedding]))
        color = "red" if record.switched else "black"
        ax.annotate("", xy=end, xytext=start, arrowprops={"arrowstyle": "->", "color": color, "linewidth": 1.5})
    switched = sum(record.switched for record in pull_records)
    ax.set_title(f"적대적 끌림 효과 (중심 하위집단 변경 {switched}/{len(pull_records)})", fontsize=16,
                 fontweight="bold", pad=20)
    ax.set_xlabel("성분 1", fontsize=12, fontweight="bold")
    ax.set_ylabel("성분 2", fontsize=12, fontweight="bold")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_loss_curves(histories, path):
    """β 별 학습 손실 곡선 (total, recon, kl)"""
    setup_korean_font()
    frames = [history.assign(β=f"β={beta:g}") for beta, history in sorted(histories.items())]
    if not frames:
        return _empty_figure(path, "학습 이력 없음")
    data = pd.concat(frames, ignore_index=True)
    fig, axes = plt.subplots(1, 3, figsize=(18, 5))
    for ax, column, title in zip(axes, ["total", "recon", "kl"], ["전체 손실", "재구성 항", "KL 항"]):
        sns.lineplot(data=data, x="epoch", y=column, hue="β", marker="o", ax=ax)
        ax.set_title(title, fontsize=14, fontweight="bold")
        ax.set_xlabel("epoch", fontsize=12, fontweight="bold")
        ax.grid(True, alpha=0.3)
    fig.suptitle("β-VAE 학습 손실", fontsize=16, fontweight="bold")
    return _save(fig, path)
