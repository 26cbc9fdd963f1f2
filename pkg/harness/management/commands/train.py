# harness/management/commands/train.py

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from harness.cli_func import (
    FINETUNE_SEED_OFFSET, HELDOUT_SEED_OFFSET, PRETRAIN_SEED_OFFSET, add_model_arguments,
    checkpoint_paths, task_kind_from_options,
)
from harness.dataset_func import pretraining_corpus, synthesize_dataset
from modelzoo.checkpoint_func import load_pretrained, register_checkpoint, save_pretrained, save_task
from modelzoo.exceptions import LabError
from modelzoo.networks import ModelConfig, build_pretrained
from modelzoo.training_func import fine_tune, pretrain


class Command(BaseCommand):
    help = 'Pre-train a toy vision-language model and fully fine-tune it on one task'

    def add_arguments(self, parser):
        add_model_arguments(parser)
        parser.add_argument('--train-samples', type=int, default=None)
        parser.add_argument('--heldout-samples', type=int, default=None)
        parser.add_argument('--pretrain-epochs', type=int, default=None)
        parser.add_argument('--finetune-epochs', type=int, default=None)
        parser.add_argument('--force', action='store_true', help='Re-train an existing pretrained checkpoint')

    def handle(self, *args, **options):
        conf = settings.VLATTACK
        structure = options['model']
        seed = options['seed']
        train_samples = options['train_samples'] or conf['TRAIN_SAMPLES']
        heldout_samples = options['heldout_samples'] or conf['HELDOUT_SAMPLES']

        try:
            task_kind = task_kind_from_options(options)
            pretrained_path, task_path = checkpoint_paths(structure, task_kind, seed)
            config = ModelConfig(structure=structure, **conf['MODEL'])

            self.stdout.write(f"\n{'=' * 70}")
            self.stdout.write(f"TRAINING {structure} / {task_kind} (seed={seed})")
            self.stdout.write(f"{'=' * 70}\n")

            if pretrained_path.exists() and not options['force']:
                self.stdout.write(f"Reusing pretrained checkpoint {pretrained_path}")
                model = load_pretrained(pretrained_path)
            else:
                recipe = {'epochs': options['pretrain_epochs']} if options['pretrain_epochs'] else None
                corpus = pretraining_corpus(train_samples, PRETRAIN_SEED_OFFSET + seed, config.image_size)
                model = pretrain(build_pretrained(config, seed), corpus, recipe=recipe, seed=seed)
                save_pretrained(model, pretrained_path, name=pretrained_path.stem)
                register_checkpoint(pretrained_path.stem, pretrained_path, structure, seed)
                self.stdout.write(self.style.SUCCESS(f"Pretrained checkpoint: {pretrained_path}"))

            recipe = {'epochs': options['finetune_epochs']} if options['finetune_epochs'] else None
            task_data = synthesize_dataset(task_kind, train_samples, FINETUNE_SEED_OFFSET + seed, config.image_size)
            heldout = synthesize_dataset(task_kind, heldout_samples, HELDOUT_SEED_OFFSET + seed, config.image_size)
            task = fine_tune(model, task_data.samples, task_kind, recipe=recipe, seed=seed, heldout=heldout.samples)
            save_task(task, task_path, name=task_path.stem)
            register_checkpoint(task_path.stem, task_path, structure, seed,
                                task_kind=task_kind, metrics=task.heldout_metrics)
        except LabError as e:
            raise CommandError(str(e))

        self.stdout.write(self.style.SUCCESS(f"Task checkpoint: {task_path}"))
        for name, value in task.heldout_metrics.items():
            self.stdout.write(f"  held-out {name}: {value:.4f}")
