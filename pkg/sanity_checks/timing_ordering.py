#%%

"""
Per-global-epoch wall time of USAD on PSM: MOON runs two extra forward passes per batch, so it must be slower than
FedAvg; SCAFFOLD adds a correction per step and must not be faster.
"""
import tempfile
from dataclasses import replace

import numpy as np

from fedtsad.dataset import write_synthetic_dataset
from fedtsad.runner import config_from_sections, run_experiment
from fedtsad.utils import setup_logging

setup_logging('WARNING')
print('--- Sanity check: seconds per round MOON > FedAvg and SCAFFOLD >= FedAvg --')

root = tempfile.mkdtemp()
write_synthetic_dataset('PSM', root, train_rows=2000, test_rows=500, seed=0)
cfg = config_from_sections({'dataset': {'name': 'psm', 'root': root},
                            'model': {'kind': 'usad'},
                            'federation': {'local_epochs': 2},
                            'runner': {'smoke': True, 'output_dir': tempfile.mkdtemp()}})

seconds = {}
for strategy in ('FedAvg', 'FedProx', 'SCAFFOLD', 'MOON'):
    per_run = [np.mean(run_experiment(replace(cfg, federation=replace(cfg.federation, strategy=strategy)),
                                      seed).round_seconds)
               for seed in range(3)]
    seconds[strategy] = float(np.median(per_run))
    print(f'{strategy}: {seconds[strategy]:.3f}s per global epoch')

assert seconds['MOON'] > seconds['FedAvg'], f'{seconds=}'
assert seconds['SCAFFOLD'] >= seconds['FedAvg'], f'{seconds=}'
