# Generated by Django 5.1.4 on 2026-10-18 09:00

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='Checkpoint',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=120, unique=True)),
                ('path', models.CharField(help_text='Checkpoint container on disk', max_length=500)),
                ('structure', models.CharField(choices=[('encoder_only', 'Encoder-only'), ('encoder_decoder', 'Encoder-decoder')], db_index=True, max_length=20)),
                ('task_kind', models.CharField(blank=True, choices=[('', 'Pretrained (no task)'), ('classification', 'Classification'), ('sequence_generation', 'Sequence generation'), ('grounding', 'Grounding')], db_index=True, default='', max_length=30)),
                ('seed', models.IntegerField(blank=True, null=True)),
                ('metrics', models.JSONField(blank=True, default=dict, help_text='Held-out metrics of fine-tuned tasks')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'verbose_name': 'Checkpoint',
                'verbose_name_plural': 'Checkpoints',
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['structure', 'task_kind'], name='idx_checkpoint_structure_task')],
            },
        ),
    ]
