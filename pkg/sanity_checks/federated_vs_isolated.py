#%%

"""
Federated training of USAD on a smoke-scale PSM should, in most seeds, reach an AUC-ROC at least as high as the
average of clients trained in isolation on their own block of the series.
"""
import tempfile
from dataclasses import replace

from fedtsad.dataset import write_synthetic_dataset
from fedtsad.runner import config_from_sections, run_experiment
from fedtsad.utils import setup_logging

setup_logging('WARNING')
print('--- Sanity check: FedAvg AUC-ROC >= isolated average AUC-ROC on PSM with USAD --')

root = tempfile.mkdtemp()
write_synthetic_dataset('PSM', root, train_rows=2000, test_rows=1000, seed=0)
out = tempfile.mkdtemp()

cfg = config_from_sections({'dataset': {'name': 'psm', 'root': root},
                            'model': {'kind': 'usad'},
                            'federation': {'strategy': 'fedavg', 'local_epochs': 2},
                            'runner': {'smoke': True, 'output_dir': out}})
isolated_cfg = replace(cfg, federation=replace(cfg.federation, strategy='Isolated'))

wins = 0
for seed in range(5):
    fedavg = run_experiment(cfg, seed).result['auc_roc']
    isolated = run_experiment(isolated_cfg, seed).result['auc_roc']
    wins += fedavg >= isolated
    print(f'{seed=}: {fedavg=:.4f} {isolated=:.4f}')
print(f'FedAvg at least as good in {wins} of 5 seeds')
assert wins >= 3, f'Expected federated training to win in at least 3 of 5 seeds, but got {wins=}'
