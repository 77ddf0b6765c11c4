import torch

# Single-threaded torch keeps every learned-component test bit-reproducible.
torch.set_num_threads(1)
