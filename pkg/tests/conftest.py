import os

import torch

# keep runs reproducible regardless of the host's core count
os.environ.setdefault("SRVD_THREADS", "1")
torch.set_num_threads(int(os.environ["SRVD_THREADS"]))
