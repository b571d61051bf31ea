# Generated by Django 4.2.16 on 2026-10-12 09:41

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(choices=[('fit', 'Fit'), ('synth', 'Synthesize'), ('simulate', 'Simulate'), ('verify', 'Verify'), ('export', 'Export')], max_length=20)),
                ('preset', models.CharField(blank=True, max_length=50)),
                ('seed', models.IntegerField(blank=True, null=True)),
                ('config_hash', models.CharField(blank=True, max_length=64)),
                ('out_dir', models.CharField(max_length=500)),
                ('status', models.CharField(choices=[('running', 'Running'), ('succeeded', 'Succeeded'), ('failed', 'Failed'), ('negative', 'Verification negative')], default='running', max_length=20)),
                ('exit_code', models.IntegerField(blank=True, null=True)),
                ('manifest', models.JSONField(blank=True, default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'db_table': 'experiment_run',
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['command', 'status'], name='exprun_command_status_idx'), models.Index(fields=['config_hash'], name='exprun_config_hash_idx')],
            },
        ),
    ]
