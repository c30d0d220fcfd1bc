#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
하위집단 강건성 감사 명령행 도구

    python -m subgroup_robustness synth  --config run.json
    python -m subgroup_robustness train  --config run.json [--resume]
    python -m subgroup_robustness attack --config run.json
    python -m subgroup_robustness audit  --config run.json [--skip-probes] [--skip-latent]
    python -m subgroup_robustness probe  --config run.json
    python -m subgroup_robustness latent --config run.json
    python -m subgroup_robustness report --run-id <id> --format csv|json|xlsx

종료 코드: 0 성공, 1 사용법/설정 오류, 2 파이프라인 실패 (부분 출력 보존)
"""

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from . import plots
from .attack import ArtifactCache, attack_many
from .config import load_config, save_config
from .dataio import (
    SubgroupKey,
    cardinality_frame,
    generate_synthetic_dataset,
    load_celeba,
    load_dataset_folder,
    make_prototypes,
    sample_evaluation_set,
    write_dataset_folder,
)
from .errors import AuditError, ConfigError, TrainingDivergedError, UnknownRunError
from .latentlab import (
    embed_dataset,
    neighborhood_purity,
    project_2d,
    pull_effect,
    pull_frame,
    save_pull_records,
)
from .probes import (
    accuracy_table,
    build_input_bank,
    save_probe,
    subgroup_switch_rate,
    switch_frame,
    train_probe,
)
from .report import (
    EMPTY_MARKER,
    MANIFEST_NAME,
    REPORT_NAME,
    AuditReport,
    RunManifest,
    beta_summary,
    emit_directory,
    input_hashes,
    read_json,
    resolve_run,
    write_json,
)
from .robustness import (
    RobustnessRecord,
    aggregate,
    cross_beta_frame,
    disparity_metrics,
    evaluate_subgroups,
    marginal_aggregate,
    max_damage_samples,
    omitted_subgroups,
    records_frame,
    scatter_data,
)
from .vae import Checkpoint, history_frame, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

REPORT_FORMATS = ("csv", "json", "xlsx")


class AuditArgumentParser(argparse.ArgumentParser):
    """사용법 오류를 종료 코드 1 로 보고"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"사용법 오류: {message}")


def beta_tag(beta):
    return f"beta{float(beta):g}"


# =============================================================================
# 실행 컨텍스트
# =============================================================================

@dataclass
class RunContext:
    """설정, 실행 디렉터리, 매니페스트 (매니페스트 기록은 메인 스레드에서만)"""

    config: object
    run_id: str
    run_dir: Path
    manifest: RunManifest

    @property
    def group_labels(self):
        return self.config.data.group_labels

    def path(self, *parts):
        path = self.run_dir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def output(self, path):
        self.manifest.add_output(self.run_dir, path)
        return path

    def checkpoint_path(self, beta):
        return self.run_dir / "checkpoints" / f"{beta_tag(beta)}.ckpt"

    @property
    def cache_root(self):
        return self.run_dir / "cache" / "attacks"

    def save_manifest(self, status):
        self.manifest.status = status
        self.manifest.save(self.run_dir)


def build_context(args):
    overrides = {"runtime": {}}
    if args.seed is not None:
        overrides["runtime"]["seed"] = args.seed
    if args.workers is not None:
        overrides["runtime"]["workers"] = args.workers
    if args.out is not None:
        overrides["runtime"]["out"] = args.out
    config = load_config(args.config, overrides=overrides).resolved()

    run_id = args.run_id or f"audit-{config.config_hash()[:10]}"
    run_dir = Path(config.runtime.out) / run_id
    if (run_dir / MANIFEST_NAME).exists():
        manifest = RunManifest.load(run_dir)
        manifest.config = config.to_dict()
        manifest.seeds = config.seed_registry()
    else:
        manifest = RunManifest(run_id, config.to_dict(), config.seed_registry())
    return RunContext(config, run_id, run_dir, manifest)


def _write_config_snapshot(ctx):
    ctx.output(save_config(ctx.config, ctx.path("config.json")))


# =============================================================================
# 데이터 / 체크포인트 로드
# =============================================================================

def load_data(ctx):
    """설정된 원천에서 (데이터셋, 하위집단 테이블) 로드"""
    data = ctx.config.data
    if data.source == "synthetic":
        directory = ctx.run_dir / "dataset"
        if not directory.exists():
            raise AuditError(f"합성 데이터셋이 없습니다. 먼저 synth 명령을 실행하세요: {directory}")
        dataset, table, _ = load_dataset_folder(directory)
        ctx.manifest.input_hashes.update(input_hashes({"dataset_manifest": directory / "manifest.json"}))
    elif data.source == "folder":
        dataset, table, _ = load_dataset_folder(data.directory, data.resolution)
        ctx.manifest.input_hashes.update(input_hashes({"dataset_manifest": Path(data.directory) / "manifest.json"}))
    else:
        dataset, table = load_celeba(data.image_dir, data.attribute_file, data.protected, data.resolution,
                                     data.channels, data.limit)
        ctx.manifest.input_hashes.update(input_hashes({"attribute_file": data.attribute_file}))
    if set(table.protected) != set(data.protected):
        raise ConfigError(f"데이터셋 보호 속성 {table.protected} 가 설정 {data.protected} 와 다름")
    return dataset, table


def load_checkpoints(ctx):
    """설정된 β 마다 체크포인트 로드 (없으면 중단)"""
    checkpoints = {}
    for beta in ctx.config.betas:
        path = ctx.checkpoint_path(beta)
        if not path.exists():
            raise AuditError(f"β={beta:g} 체크포인트가 없습니다. 먼저 train 명령을 실행하세요: {path}")
        checkpoint = Checkpoint.load(path)
        if checkpoint.config.beta != beta:
            raise AuditError(f"체크포인트 β 불일치: 파일 {path}, 저장된 β={checkpoint.config.beta:g}")
        checkpoints[beta] = checkpoint
        ctx.manifest.input_hashes[f"checkpoint_{beta_tag(beta)}"] = checkpoint.content_hash()
    return checkpoints


def evaluation_set_for(ctx, table):
    evaluation = sample_evaluation_set(table, ctx.config.evaluation.n, ctx.config.evaluation.seed)
    ctx.output(write_json(ctx.path("evaluation_set.json"), evaluation.to_dict()))
    print(f"📊 평가 샘플: {evaluation.size:,}개 ({len(evaluation.per_subgroup)}개 하위집단 × 최대 {evaluation.n}개)")
    return evaluation


def attack_all(ctx, dataset, evaluation, checkpoints):
    """β 별 공격 실행 (캐시 재사용) → ({β: 모델}, {β: AttackBatch})"""
    models, batches = {}, {}
    for beta, checkpoint in checkpoints.items():
        model = checkpoint.to_model()
        cache = ArtifactCache(ctx.cache_root, checkpoint.content_hash(), ctx.config.attack)
        items = [(sample_id, dataset.image(sample_id)) for sample_id in evaluation.ids()]
        print(f"\n🎯 β={beta:g}: {len(items):,}개 샘플 공격 (c={ctx.config.attack.budget:g}, "
              f"{ctx.config.attack.steps} steps)")
        batch = attack_many(model, items, ctx.config.attack, workers=ctx.config.runtime.workers, cache=cache,
                            progress=ctx.config.runtime.progress)
        models[beta] = model
        batches[beta] = batch
        if batch.failures:
            ctx.manifest.partial.append(f"attack {beta_tag(beta)}: {len(batch.failures)} failures")
    return models, batches


# =============================================================================
# 명령: synth / train / attack
# =============================================================================

def cmd_synth(ctx):
    """합성 불균형 데이터셋 + 매니페스트 생성"""
    config = ctx.config
    if config.data.source != "synthetic":
        raise ConfigError(f"synth 명령은 data.source=synthetic 에서만 사용합니다 (현재 {config.data.source}).")
    keys = [SubgroupKey.from_name(name) for name in config.synthetic.cardinalities]
    expected = set(config.data.protected)
    mismatched = [key.name for key in keys if set(key.attributes) != expected]
    if mismatched:
        raise ConfigError(f"하위집단 이름의 속성이 보호 속성 {sorted(expected)} 와 다름: {mismatched}")

    shape = (*config.data.resolution, config.data.channels)
    print(f"🔧 합성 데이터셋 생성: {len(keys)}개 하위집단, 해상도 {shape}")
    prototypes = make_prototypes(keys, shape, config.synthetic.seed, coarse=config.synthetic.prototype_coarse)
    dataset, table = generate_synthetic_dataset(config.synthetic.cardinalities, prototypes,
                                                config.synthetic.noise_scale, config.synthetic.seed)

    _write_config_snapshot(ctx)
    directory = ctx.run_dir / "dataset"
    write_dataset_folder(dataset, table, directory, seed=config.synthetic.seed)
    ctx.output(directory / "manifest.json")
    ctx.output(directory / "list_attr.txt")
    counts = cardinality_frame(table, ctx.group_labels)
    ctx.output(_to_csv(counts, ctx.path("dataset", "cardinalities.csv")))
    print(counts.to_string(index=False))
    return EXIT_OK


def cmd_train(ctx, resume=False):
    """β 마다 체크포인트 학습 (발산한 β 는 매니페스트에 부분 결과로 기록)"""
    config = ctx.config
    _write_config_snapshot(ctx)
    dataset, _ = load_data(ctx)
    histories = {}
    failed = []
    for beta in config.betas:
        path = ctx.checkpoint_path(beta)
        previous = Checkpoint.load(path) if resume and path.exists() else None
        if resume and previous is None:
            print(f"⚠️ β={beta:g}: 재개할 체크포인트가 없어 처음부터 학습합니다.")
        try:
            checkpoint = train(dataset, config.model_config(beta), config.train_config(beta), resume=previous)
        except TrainingDivergedError as exc:
            print(f"❌ β={beta:g} 학습 발산: {exc}")
            ctx.manifest.partial.append(f"train {beta_tag(beta)}: {exc}")
            failed.append(beta)
            continue
        ctx.output(checkpoint.save(ctx.path("checkpoints", f"{beta_tag(beta)}.ckpt")))
        history = history_frame(checkpoint)
        history_path = ctx.path("checkpoints", f"{beta_tag(beta)}_history.csv")
        history.to_csv(history_path, index=False)
        ctx.output(history_path)
        histories[beta] = history
        print(f"💾 β={beta:g} 체크포인트 저장: {path} (누적 {checkpoint.metadata.epochs} epoch)")

    if histories:
        ctx.output(plots.plot_loss_curves(histories, ctx.path("figures", "loss_curves.png")))
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_attack(ctx):
    """평가 샘플 공격 결과를 캐시에 저장"""
    _write_config_snapshot(ctx)
    dataset, table = load_data(ctx)
    checkpoints = load_checkpoints(ctx)
    evaluation = evaluation_set_for(ctx, table)
    _, batches = attack_all(ctx, dataset, evaluation, checkpoints)
    for beta, batch in batches.items():
        cache = ArtifactCache(ctx.cache_root, checkpoints[beta].content_hash(), ctx.config.attack)
        ctx.output(cache.directory / "batch_manifest.json")
        print(f"✅ β={beta:g}: 공격 {len(batch.artifacts):,}개 성공, {len(batch.failures):,}개 실패")
    return EXIT_FAILURE if any(batch.failures for batch in batches.values()) else EXIT_OK


# =============================================================================
# 단계: 강건성 / 프로브 / 잠재 공간
# =============================================================================

def robustness_stage(ctx, dataset, table, evaluation, models, batches):
    """β 별 Δc 기록, 통계, 불균형 지표, 그래프"""
    config = ctx.config
    all_records = []
    per_beta = {}
    for beta in config.betas:
        batch = batches[beta]
        records = [
            RobustnessRecord.failed(record.sample_id, record.subgroup, beta, batch.failures[record.sample_id])
            if record.sample_id in batch.failures else record
            for record in evaluate_subgroups(models[beta], dataset, evaluation, config.attack,
                                             artifacts=batch.artifacts, beta=beta)
        ]
        all_records += records

        frame = records_frame(records)
        ctx.output(_to_csv(frame, ctx.path("records", f"records_{beta_tag(beta)}.csv")))
        stats, marginal, disparity = {}, {}, None
        if any(record.ok for record in records):
            stats = aggregate(records)
            marginal = {attribute: marginal_aggregate(records, attribute) for attribute in table.protected}
            if len(stats) >= 2:
                disparity = disparity_metrics(stats)
        per_beta[beta] = beta_summary(records, stats, marginal, disparity, omitted_subgroups(records))
        if disparity is not None:
            print(f"📊 β={beta:g}: 최악 하위집단 {disparity.worst.label(ctx.group_labels)}, "
                  f"중앙값 비율 {disparity.ratio:.3f}, 차이 {disparity.gap:.4f}")

    frame = records_frame(all_records)
    ctx.output(_to_csv(frame, ctx.path("records", "records.csv")))
    scatter = pd.DataFrame(scatter_data(all_records), columns=["recon_loss", "deviation", "subgroup", "beta"])
    ctx.output(_to_csv(scatter, ctx.path("records", "scatter.csv")))
    ctx.output(_to_csv(cross_beta_frame(all_records), ctx.path("records", "cross_beta.csv"), index=True))

    counts = cardinality_frame(table, ctx.group_labels)
    ctx.output(plots.plot_deviation_scatter(frame, ctx.path("figures", "deviation_scatter.png"), ctx.group_labels))
    ctx.output(plots.plot_subgroup_boxes(frame, counts, ctx.path("figures", "subgroup_boxes.png"),
                                         ctx.group_labels))
    for attribute in table.protected:
        ctx.output(plots.plot_marginal_boxes(frame, attribute, ctx.path("figures", f"marginal_{attribute}.png"),
                                             ctx.group_labels))
    return all_records, per_beta


def probe_stage(ctx, dataset, evaluation, models, batches):
    """프로브 학습 → 정확도 표, 하위집단 전환율"""
    config = ctx.config
    held_out = set(evaluation.ids())
    training_ids = [sample_id for sample_id in dataset.ids if sample_id not in held_out]
    artifacts = {beta: batch.artifacts for beta, batch in batches.items()}
    bank = build_input_bank(dataset, evaluation, models, artifacts)

    probes = {}
    for target in config.probes.targets:
        path = ctx.path("probes", f"probe_{target}.ckpt")
        probes[target] = train_probe(dataset, target, config.probes.probe, ids=training_ids)
        ctx.output(save_probe(probes[target], path))

    tables = {}
    for target, probe in probes.items():
        report = accuracy_table(probe, dataset, evaluation, models, artifacts, bank=bank)
        ctx.output(_to_csv(report.table(ctx.group_labels), ctx.path("probes", f"{target}_table.csv")))
        ctx.output(_to_csv(report.log, ctx.path("probes", f"{target}_predictions.csv")))
        tables[target] = report.to_dict()
        print(report.table(ctx.group_labels).to_string(index=False))

    rates = {
        beta: subgroup_switch_rate(probes.values(), dataset, evaluation, models[beta], artifacts[beta], bank=bank,
                                   beta=beta)
        for beta in config.betas
    }
    ctx.output(_to_csv(switch_frame(rates, ctx.group_labels), ctx.path("probes", "switch_rates.csv")))
    switch = {
        f"{beta:g}": {key.name: rate for key, rate in beta_rates.items()} for beta, beta_rates in rates.items()
    }
    return tables, switch


def latent_stage(ctx, dataset, table, evaluation, models, batches, records):
    """임베딩, 2D 투영, 끌림 효과, 이웃 순도"""
    config = ctx.config
    summary = {}
    for beta in config.betas:
        tag = beta_tag(beta)
        matrix = embed_dataset(models[beta], dataset, table)
        ctx.output(matrix.to_csv(ctx.path("latent", f"embeddings_{tag}.csv")))
        projection = project_2d(matrix, config.latent.projection, seed=config.latent.seed)
        projection_frame = projection.to_frame(matrix)
        ctx.output(_to_csv(projection_frame, ctx.path("latent", f"projection_{config.latent.projection}_{tag}.csv")))

        beta_records = [record for record in records if record.beta == beta and record.ok]
        deviations = {record.sample_id: record.deviation for record in beta_records}
        ctx.output(plots.plot_embedding_map(projection_frame, ctx.path("figures", f"embedding_{tag}.png"),
                                            deviations=deviations or None, group_labels=ctx.group_labels))
        if config.latent.tsne:
            tsne = project_2d(matrix, "tsne", seed=config.latent.seed)
            tsne_frame = tsne.to_frame(matrix)
            ctx.output(_to_csv(tsne_frame, ctx.path("latent", f"projection_tsne_{tag}.csv")))
            ctx.output(plots.plot_embedding_map(tsne_frame, ctx.path("figures", f"embedding_tsne_{tag}.png"),
                                                group_labels=ctx.group_labels, title="잠재 임베딩 (t-SNE)"))

        selected = sorted(
            record.sample_id
            for top in max_damage_samples(beta_records, config.latent.pull_samples).values()
            for record in top
        )
        artifacts = batches[beta].artifacts
        pulls = [
            pull_effect(models[beta], matrix, dataset.image(sample_id), artifacts[sample_id].delta,
                        k=config.latent.k, sample_id=sample_id, mode=config.latent.knn_mode,
                        budget=config.attack.budget)
            for sample_id in selected if sample_id in artifacts
        ]
        ctx.output(save_pull_records(pulls, ctx.path("latent", f"pull_{tag}.json")))
        pull_table = pull_frame(pulls)
        ctx.output(_to_csv(pull_table, ctx.path("latent", f"pull_{tag}.csv")))
        if projection.components is not None and pulls:
            ctx.output(plots.plot_pull_map(projection, projection_frame, pulls, ctx.path("figures", f"pull_{tag}.png"),
                                           ctx.group_labels))

        purity = neighborhood_purity(matrix, config.latent.k) if len(matrix) >= 2 else {}
        summary[f"{beta:g}"] = {
            "rows": len(matrix),
            "projection": config.latent.projection,
            "knn_mode": config.latent.knn_mode,
            "purity": {key.name: value for key, value in purity.items()},
            "pull": {
                "count": len(pulls),
                "switched": int(pull_table["switched"].sum()) if pulls else 0,
                "median_displacement": float(pull_table["displacement"].median()) if pulls else None,
                "switched_ids": sorted(pull_table.loc[pull_table["switched"], "id"]) if pulls else [],
            },
        }
        print(f"🔍 β={beta:g}: 끌림 분석 {len(pulls)}개, 중심 하위집단 변경 {summary[f'{beta:g}']['pull']['switched']}개")
    return summary


def _to_csv(frame, path, index=False):
    frame.to_csv(path, index=index)
    return path


# =============================================================================
# 명령: audit / probe / latent
# =============================================================================

def _prepare(ctx):
    _write_config_snapshot(ctx)
    dataset, table = load_data(ctx)
    checkpoints = load_checkpoints(ctx)
    evaluation = evaluation_set_for(ctx, table)
    models, batches = attack_all(ctx, dataset, evaluation, checkpoints)
    return dataset, table, checkpoints, evaluation, models, batches


def cmd_audit(ctx, skip_probes=False, skip_latent=False):
    """전체 파이프라인 → AuditReport + RunManifest"""
    ctx.manifest.start("audit")
    dataset, table, checkpoints, evaluation, models, batches = _prepare(ctx)
    records, per_beta = robustness_stage(ctx, dataset, table, evaluation, models, batches)

    probes, switch = None, None
    if skip_probes:
        print("⏭️ 프로브 단계 생략 (--skip-probes)")
    else:
        print("\n🧪 프로브 평가")
        probes, switch = probe_stage(ctx, dataset, evaluation, models, batches)

    latent = None
    if skip_latent:
        print("⏭️ 잠재 공간 단계 생략 (--skip-latent)")
    else:
        print("\n🔍 잠재 공간 분석")
        latent = latent_stage(ctx, dataset, table, evaluation, models, batches, records)

    report = AuditReport(
        run_id=ctx.run_id,
        config_hash=ctx.config.config_hash(),
        checkpoints={beta: checkpoint.content_hash() for beta, checkpoint in checkpoints.items()},
        per_beta=per_beta,
        probes=probes,
        switch_rates=switch,
        latent=latent,
        files={name: path for name, path in _report_files(ctx).items()},
        notes={
            "probe_training_inputs": "direct images only",
            "reconstruction": "deterministic decode of the posterior mean",
            "evaluation_warnings": [warning.message for warning in evaluation.warnings],
        },
    )
    ctx.output(report.save(ctx.path(REPORT_NAME)))
    ctx.manifest.finish("audit")
    print(f"\n📄 감사 보고서: {ctx.run_dir / REPORT_NAME}")
    print(f"🔑 보고서 내용 해시: {report.content_hash()}")
    return EXIT_FAILURE if ctx.manifest.partial else EXIT_OK


def _report_files(ctx):
    names = {}
    for relative in sorted(ctx.manifest.outputs):
        if relative.startswith(("figures/", "records/", "probes/")) and not relative.endswith(".ckpt"):
            names[relative] = relative
    return names


def cmd_probe(ctx):
    """프로브 단계만 실행 (공격 결과는 캐시 재사용)"""
    dataset, _, _, evaluation, models, batches = _prepare(ctx)
    tables, switch = probe_stage(ctx, dataset, evaluation, models, batches)
    write_json(ctx.path("probes", "probe_summary.json"), {"tables": tables, "switch_rates": switch})
    ctx.output(ctx.run_dir / "probes" / "probe_summary.json")
    return EXIT_OK


def cmd_latent(ctx):
    """잠재 공간 단계만 실행"""
    dataset, table, _, evaluation, models, batches = _prepare(ctx)
    records = []
    for beta in ctx.config.betas:
        records += evaluate_subgroups(models[beta], dataset, evaluation, ctx.config.attack,
                                      artifacts=batches[beta].artifacts, beta=beta)
    summary = latent_stage(ctx, dataset, table, evaluation, models, batches, records)
    ctx.output(write_json(ctx.path("latent", "latent_summary.json"), summary))
    return EXIT_OK


# =============================================================================
# 명령: report
# =============================================================================

def _box_stats(report):
    per_beta = report.get("per_beta", {})
    if not per_beta:
        return {"status": EMPTY_MARKER}
    return {
        beta: {
            "status": entry.get("status"),
            "stats": entry.get("stats", {}),
            "marginal": entry.get("marginal", {}),
        }
        for beta, entry in per_beta.items()
    }


def _disparities(report):
    return {beta: entry.get("disparity") for beta, entry in report.get("per_beta", {}).items()}


def _read_csv(path, columns):
    if path.exists():
        return pd.read_csv(path, dtype={"id": str, "subgroup": str})
    return pd.DataFrame(columns=columns)


def cmd_report(out, run_id, fmt):
    """감사 결과 → 표/그래프 데이터 파일 (report_<형식>/ 에 원자적으로 기록)"""
    if fmt not in REPORT_FORMATS:
        raise ConfigError(f"지원하지 않는 형식입니다: {fmt}")
    run_dir = resolve_run(out, run_id)
    report_path = run_dir / REPORT_NAME
    if not report_path.exists():
        raise UnknownRunError(f"run {run_id} 에 감사 보고서가 없습니다: {report_path}")
    report = read_json(report_path)

    scatter = _read_csv(run_dir / "records" / "scatter.csv", ["recon_loss", "deviation", "subgroup", "beta"])
    probe_tables = {
        path.name[: -len("_table.csv")]: pd.read_csv(path, dtype=str)
        for path in sorted((run_dir / "probes").glob("*_table.csv"))
    }
    switch = _read_csv(run_dir / "probes" / "switch_rates.csv", ["subgroup"])
    box_stats = _box_stats(report)
    disparities = _disparities(report)

    def writer(staging):
        if fmt == "csv":
            scatter.to_csv(staging / "scatter.csv", index=False)
            for target, frame in probe_tables.items():
                frame.to_csv(staging / f"probe_{target}.csv", index=False)
            if not switch.empty:
                switch.to_csv(staging / "switch_rates.csv", index=False)
            write_json(staging / "box_stats.json", box_stats)
            write_json(staging / "disparity.json", disparities)
        elif fmt == "json":
            write_json(staging / "report.json", report)
            write_json(staging / "scatter.json", scatter.to_dict(orient="records") if not scatter.empty
                       else {"status": EMPTY_MARKER})
            write_json(staging / "box_stats.json", box_stats)
            write_json(staging / "probe_tables.json",
                       {target: frame.to_dict(orient="records") for target, frame in probe_tables.items()})
        else:
            with pd.ExcelWriter(staging / "report.xlsx", engine="openpyxl") as excel:
                scatter.to_excel(excel, sheet_name="scatter", index=False)
                _stats_sheet(box_stats).to_excel(excel, sheet_name="box_stats", index=False)
                for target, frame in probe_tables.items():
                    frame.to_excel(excel, sheet_name=f"probe_{target}"[:31], index=False)
                if not switch.empty:
                    switch.to_excel(excel, sheet_name="switch_rates", index=False)

    target = emit_directory(run_dir / f"report_{fmt}", writer)
    print(f"💾 보고서 파일 생성: {target}")
    for path in sorted(target.iterdir()):
        print(f"   - {path.name}")
    return EXIT_OK


def _stats_sheet(box_stats):
    rows = []
    if box_stats.get("status") == EMPTY_MARKER:
        return pd.DataFrame([{"status": EMPTY_MARKER}])
    for beta, entry in box_stats.items():
        for subgroup, values in (entry.get("stats") or {}).items():
            rows.append({"beta": beta, "subgroup": subgroup, **values})
    if not rows:
        return pd.DataFrame([{"status": EMPTY_MARKER}])
    return pd.DataFrame(rows)


# =============================================================================
# 진입점
# =============================================================================

def build_parser():
    common = AuditArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="실행 설정 JSON 파일")
    common.add_argument("--seed", type=int, default=None, help="전역 시드 (runtime.seed)")
    common.add_argument("--workers", type=int, default=None, help="공격 작업자 수 (runtime.workers)")
    common.add_argument("--out", type=str, default=None, help="출력 루트 디렉터리 (runtime.out)")
    common.add_argument("--run-id", type=str, default=None, help="실행 id (기본: 설정 해시 기반)")

    parser = AuditArgumentParser(prog="subgroup_robustness", description="β-VAE 하위집단 적대적 강건성 감사")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", parents=[common], help="합성 불균형 데이터셋 생성")
    train_parser = commands.add_parser("train", parents=[common], help="β 별 β-VAE 학습")
    train_parser.add_argument("--resume", action="store_true", help="저장된 체크포인트에서 학습 재개")
    commands.add_parser("attack", parents=[common], help="평가 샘플 최대 손상 공격")
    audit_parser = commands.add_parser("audit", parents=[common], help="전체 감사 파이프라인")
    audit_parser.add_argument("--skip-probes", action="store_true", help="프로브 단계 생략")
    audit_parser.add_argument("--skip-latent", action="store_true", help="잠재 공간 단계 생략")
    commands.add_parser("probe", parents=[common], help="프로브 정확도 표와 전환율")
    commands.add_parser("latent", parents=[common], help="임베딩, 끌림 효과, 2D 투영")
    report_parser = commands.add_parser("report", parents=[common], help="표/그래프 데이터 파일 생성")
    report_parser.add_argument("--format", choices=REPORT_FORMATS, default="csv", help="출력 형식")
    return parser


def run(args):
    if args.command == "report":
        if args.run_id is None:
            ctx = build_context(args)
            return cmd_report(ctx.config.runtime.out, ctx.run_id, args.format)
        out = args.out if args.out is not None else load_config(args.config, overrides={}).runtime.out
        return cmd_report(out, args.run_id, args.format)

    ctx = build_context(args)
    print("=" * 80)
    print(f"🚀 {args.command} 시작 (run id: {ctx.run_id})")
    print("=" * 80)
    try:
        if args.command == "synth":
            code = cmd_synth(ctx)
        elif args.command == "train":
            code = cmd_train(ctx, resume=args.resume)
        elif args.command == "attack":
            code = cmd_attack(ctx)
        elif args.command == "audit":
            code = cmd_audit(ctx, skip_probes=args.skip_probes, skip_latent=args.skip_latent)
        elif args.command == "probe":
            code = cmd_probe(ctx)
        else:
            code = cmd_latent(ctx)
    except ConfigError:
        raise
    except BaseException:
        if ctx.run_dir.exists():
            ctx.manifest.partial.append(f"{args.command}: aborted")
            ctx.save_manifest("partial")
        raise

    if ctx.run_dir.exists():
        ctx.save_manifest("complete" if code == EXIT_OK else "partial")
    print("=" * 80)
    print(f"✅ {args.command} 완료 (결과: {ctx.run_dir})" if code == EXIT_OK
          else f"⚠️ {args.command} 부분 완료 (결과: {ctx.run_dir})")
    print("=" * 80)
    return code


def main(argv=None):
    """메인 실행 함수"""
    try:
        args = build_parser().parse_args(argv)
        return run(args)
    except (ConfigError, UnknownRunError) as e:
        print(f"❌ 오류 발생: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (AuditError, OSError, ValueError, RuntimeError) as e:
        print(f"❌ 오류 발생: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
