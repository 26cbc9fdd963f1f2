# Generated by Django 5.1.4 on 2026-10-18 09:00

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='EvaluationRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('mode', models.CharField(db_index=True, max_length=20)),
                ('task_kind', models.CharField(db_index=True, max_length=30)),
                ('structure', models.CharField(choices=[('encoder_only', 'Encoder-only'), ('encoder_decoder', 'Encoder-decoder')], max_length=20)),
                ('seed', models.IntegerField(default=0)),
                ('samples', models.PositiveIntegerField(default=0, help_text='Requested sample count')),
                ('attempted', models.PositiveIntegerField(default=0, help_text='Correctly predicted samples attacked')),
                ('asr_percent', models.FloatField(default=0.0)),
                ('report_path', models.CharField(max_length=500)),
                ('created_at', models.DateTimeField(auto_now_add=True, db_index=True)),
            ],
            options={
                'verbose_name': 'Evaluation Run',
                'verbose_name_plural': 'Evaluation Runs',
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['task_kind', 'mode'], name='idx_run_task_mode')],
            },
        ),
    ]
