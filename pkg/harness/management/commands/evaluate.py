# harness/management/commands/evaluate.py

from django.core.management.base import BaseCommand, CommandError

from harness.cli_func import (
    add_budget_arguments, add_evaluation_arguments, add_model_arguments, budget_from_options, default_output,
    evaluation_dataset, load_lab, record_run, sample_count_from_options, task_kind_from_options,
    workers_from_options,
)
from harness.eval_func import MODES, VLATTACK, EvalConfig, evaluate
from harness.report_func import emit_report
from modelzoo.exceptions import LabError


class Command(BaseCommand):
    help = 'Attack success rate of one mode over correctly predicted evaluation samples'

    def add_arguments(self, parser):
        add_model_arguments(parser)
        add_budget_arguments(parser)
        add_evaluation_arguments(parser)
        parser.add_argument('--mode', choices=MODES, default=VLATTACK)

    def handle(self, *args, **options):
        structure = options['model']
        samples = sample_count_from_options(options)
        try:
            task_kind = task_kind_from_options(options)
            model, task = load_lab(structure, task_kind, options['seed'])
            dataset = evaluation_dataset(task_kind, options['seed'], options['pool'] or 2 * samples)
            config = EvalConfig(
                mode=options['mode'],
                task_kind=task_kind,
                sample_count=samples,
                budget=budget_from_options(options, task_kind),
                seed=options['seed'],
                hard_label=options['hard_label'],
                workers=workers_from_options(options),
            )
            report = evaluate(config, model, task, dataset, progress=not options['no_progress'])
            out = options['out'] or default_output(
                f"{structure}-{task_kind}-{options['mode']}-s{options['seed']}.json"
            )
            path = emit_report(report, out)
            record_run(report, options['mode'], structure, path, samples)
        except LabError as e:
            raise CommandError(str(e))

        stages = report.successes_by_stage
        self.stdout.write(self.style.SUCCESS(
            f"{options['mode']} ASR {report.asr_percent:.2f}% over {report.attempted} samples"
        ))
        self.stdout.write(
            f"  by stage: image={stages['image']} text={stages['text']} multimodal={stages['multimodal']}"
        )
        self.stdout.write(f"  mean queries {report.mean_queries}, mean iterations {report.mean_image_iterations}")
        self.stdout.write(f"  report: {path}")
