# harness/management/commands/synthesize.py

from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from harness.cli_func import EVAL_SEED_OFFSET, task_kind_from_options
from harness.dataset_func import PRETRAINING, save_dataset, synthesize_dataset
from modelzoo.exceptions import LabError
from modelzoo.tasks import TASK_ALIASES


class Command(BaseCommand):
    help = 'Render a synthetic shapes dataset and export it with its JSON manifest'

    def add_arguments(self, parser):
        parser.add_argument('--task', choices=sorted(TASK_ALIASES) + [PRETRAINING], default='classification')
        parser.add_argument('--samples', type=int, default=None)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', type=str, default=None)

    def handle(self, *args, **options):
        count = options['samples'] or settings.VLATTACK['EVAL_SAMPLES']
        try:
            task_kind = PRETRAINING if options['task'] == PRETRAINING else task_kind_from_options(options)
            dataset = synthesize_dataset(task_kind, count, EVAL_SEED_OFFSET + options['seed'])
            out = Path(options['out'] or Path(settings.VLATTACK['DATA_DIR']) / f"{task_kind}-s{options['seed']}.vlck")
            data_path, manifest = save_dataset(dataset, out)
        except LabError as e:
            raise CommandError(str(e))
        self.stdout.write(self.style.SUCCESS(f"{count} {task_kind} samples -> {data_path} ({manifest.name})"))
