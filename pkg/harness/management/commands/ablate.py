# harness/management/commands/ablate.py

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from harness.cli_func import (
    add_budget_arguments, add_evaluation_arguments, add_model_arguments, budget_from_options, default_output,
    evaluation_dataset, load_lab, record_run, sample_count_from_options, task_kind_from_options,
    workers_from_options,
)
from harness.eval_func import BSA, IE, TE, run_ablation
from harness.report_func import emit_report, emit_table, render_bar_chart
from modelzoo.exceptions import LabError


class Command(BaseCommand):
    help = 'Ablation ladder: IE, TE, BSA, BSA+BA, BSA+BA+Q and VLATTACK on identical samples'

    def add_arguments(self, parser):
        add_model_arguments(parser)
        add_budget_arguments(parser)
        add_evaluation_arguments(parser)

    def handle(self, *args, **options):
        structure = options['model']
        seed = options['seed']
        samples = sample_count_from_options(options)
        try:
            task_kind = task_kind_from_options(options)
            model, task = load_lab(structure, task_kind, seed)
            dataset = evaluation_dataset(task_kind, seed, options['pool'] or 2 * samples)
            rows, reports = run_ablation(
                model, task, dataset,
                budget=budget_from_options(options, task_kind),
                seed=seed,
                sample_count=samples,
                hard_label=options['hard_label'],
                workers=workers_from_options(options),
                progress=not options['no_progress'],
            )
            out = options['out'] or default_output(f'{structure}-{task_kind}-ablation-s{seed}.json')
            table = emit_table(rows, out, title=f'Ablation {structure} / {task_kind}')
            chart = render_bar_chart(rows, table.with_suffix('.png'))
            for mode, report in reports.items():
                path = emit_report(report, table.with_name(f'{table.stem}-{mode}.json'))
                record_run(report, mode, structure, path, samples)
        except LabError as e:
            raise CommandError(str(e))

        self.stdout.write(f"\n{'MODE':<12}{'ASR %':>10}{'QUERIES':>10}")
        for row in rows:
            self.stdout.write(f"{row['mode']:<12}{row['asr_percent']:>10.2f}{row['mean_queries']:>10.2f}")
        by_mode = {row['mode']: row['asr_percent'] for row in rows}
        if by_mode[BSA] < max(by_mode[IE], by_mode[TE]):
            self.stdout.write(self.style.WARNING('BSA scored below one of its single-encoder variants'))
        self.stdout.write(self.style.SUCCESS(f"Table: {table}\nChart: {chart}"))
