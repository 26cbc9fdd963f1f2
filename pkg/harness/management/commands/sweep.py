# harness/management/commands/sweep.py

from django.core.management.base import BaseCommand, CommandError

from harness.cli_func import (
    add_budget_arguments, add_evaluation_arguments, add_model_arguments, budget_from_options, default_output,
    evaluation_dataset, load_lab, sample_count_from_options, task_kind_from_options, workers_from_options,
)
from harness.eval_func import run_sweep
from harness.report_func import emit_table
from modelzoo.exceptions import LabError


class Command(BaseCommand):
    help = 'Full-attack ASR over a grid of total (N) and single-modal (N_s) image iterations'

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
            rows = run_sweep(
                model, task, dataset,
                budget=budget_from_options(options, task_kind),
                seed=seed,
                sample_count=samples,
                hard_label=options['hard_label'],
                workers=workers_from_options(options),
                progress=not options['no_progress'],
            )
            out = options['out'] or default_output(f'{structure}-{task_kind}-sweep-s{seed}.json')
            table = emit_table(rows, out, title=f'Iteration sweep {structure} / {task_kind}')
        except LabError as e:
            raise CommandError(str(e))

        self.stdout.write(f"\n{'N':>4}{'N_s':>6}{'ASR %':>10}{'QUERIES':>10}")
        for row in rows:
            self.stdout.write(
                f"{row['steps']:>4}{row['init_steps']:>6}{row['asr_percent']:>10.2f}{row['mean_queries']:>10.2f}"
            )
        self.stdout.write(self.style.SUCCESS(f"Table: {table}"))
