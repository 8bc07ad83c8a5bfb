import torch

# keep runtimes stable on small CI boxes; all tests tolerate any thread count
torch.set_num_threads(min(torch.get_num_threads(), 2))
