# harness/management/commands/attack.py

import json

from django.core.management.base import BaseCommand, CommandError

from harness.cli_func import (
    add_budget_arguments, add_model_arguments, budget_from_options, evaluation_dataset, load_lab,
    task_kind_from_options,
)
from harness.eval_func import MODES, VLATTACK, EvalConfig, correctly_predicted, evaluate
from modelzoo.exceptions import LabError


class Command(BaseCommand):
    help = 'Attack a single correctly predicted sample and print its trace'

    def add_arguments(self, parser):
        add_model_arguments(parser)
        add_budget_arguments(parser)
        parser.add_argument('--mode', choices=MODES, default=VLATTACK)
        parser.add_argument('--index', type=int, default=0,
                            help='Attack the first correctly predicted sample at or after this index')
        parser.add_argument('--pool', type=int, default=50)

    def handle(self, *args, **options):
        try:
            task_kind = task_kind_from_options(options)
            model, task = load_lab(options['model'], task_kind, options['seed'])
            dataset = evaluation_dataset(task_kind, options['seed'], max(options['pool'], options['index'] + 1))
            candidates = [i for i in correctly_predicted(task, dataset) if i >= options['index']]
            if not candidates:
                raise CommandError(f"No correctly predicted sample at or after index {options['index']}")
            config = EvalConfig(
                mode=options['mode'],
                task_kind=task_kind,
                sample_count=1,
                budget=budget_from_options(options, task_kind),
                seed=options['seed'],
                hard_label=options['hard_label'],
            )
            report = evaluate(config, model, task, dataset, indices=candidates[:1], progress=False)
        except LabError as e:
            raise CommandError(str(e))

        entry = report.samples[0]
        self.stdout.write(f"Sample {entry['index']}: \"{entry['text']}\"")
        for event in entry['trace']:
            self.stdout.write(f"  {json.dumps(event)}")
        style = self.style.SUCCESS if entry['status'] != 'failure' else self.style.WARNING
        self.stdout.write(style(
            f"{entry['status']} after {entry['image_iterations_used']} iterations, {entry['queries_used']} queries"
        ))
        if entry['adversarial_text']:
            self.stdout.write(f"  adversarial text: \"{entry['adversarial_text']}\"")
            self.stdout.write(f"  l-inf distance:   {entry['linf_distance']:.6f}")
