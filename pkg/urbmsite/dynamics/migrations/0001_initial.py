# Generated by Django 4.2.16 on 2026-10-19 09:12

from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('experiment', models.CharField(db_index=True, max_length=32)),
                ('config', models.JSONField(default=dict)),
                ('seed', models.BigIntegerField(default=0)),
                ('output_dir', models.CharField(max_length=500)),
                ('status', models.CharField(choices=[('running', 'Running'), ('succeeded', 'Succeeded'), ('failed', 'Failed')], default='running', max_length=16)),
                ('exit_code', models.SmallIntegerField(blank=True, null=True)),
                ('wall_time_s', models.FloatField(blank=True, null=True)),
                ('metadata', models.JSONField(default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='OutputArtifact',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('file_name', models.CharField(max_length=200)),
                ('sha256', models.CharField(blank=True, max_length=64, null=True)),
                ('size_bytes', models.BigIntegerField(blank=True, null=True)),
                ('deterministic', models.BooleanField(default=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='artifacts', to='dynamics.experimentrun')),
            ],
            options={
                'ordering': ['file_name'],
            },
        ),
        migrations.AddIndex(
            model_name='experimentrun',
            index=models.Index(fields=['experiment', 'seed'], name='run_experiment_seed_idx'),
        ),
        migrations.AddConstraint(
            model_name='outputartifact',
            constraint=models.UniqueConstraint(fields=('run', 'file_name'), name='artifact_unique_per_run'),
        ),
    ]
