"""A tiny BERT-style encoder: what one forward pass records, and how checkpoints round-trip."""
import tempfile
from pathlib import Path

import numpy as np

from metakd import checkpoint
from metakd.encoder import Encoder, EncoderConfig

cfg = EncoderConfig(vocab_size=50, max_seq_len=16, num_layers=2, hidden_dim=16, num_heads=4, ffn_dim=32,
                    num_classes=2, num_domains=3)
model = Encoder(cfg, seed=0).eval()

ids = np.array([[1, 7, 8, 9, 2, 0], [1, 5, 2, 0, 0, 0]])     # [CLS] ... [SEP] then padding
mask = (ids != 0).astype(float)
trace = model(ids, mask, domain_labels=[0, 2])
print("embedding out  ", trace.embedding_out.shape)
print("hidden states  ", [h.shape for h in trace.hidden_states])
print("attention      ", [a.shape for a in trace.attention_scores], "(pre-softmax scores)")
print("pooled / h_d   ", trace.pooled.shape, trace.transfer_vec.shape)
print("class logits   ", trace.class_logits.data.round(3))

# padding never leaks into the result
wider = model(np.pad(ids, ((0, 0), (0, 3))), np.pad(mask, ((0, 0), (0, 3))), [0, 2])
print("padding-invariant:", np.allclose(trace.class_logits.data, wider.class_logits.data))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "encoder.mkd"
    model.save(path, {"note": "demo"})
    print("file header:", path.read_bytes()[:4])
    tensors, meta = checkpoint.load(path)
    print(len(tensors), "tensors; config hidden_dim =", meta["config"]["hidden_dim"])
    back, _ = Encoder.load(path)
    print("reload identical:", np.array_equal(back.eval()(ids, mask, [0, 2]).class_logits.data,
                                              trace.class_logits.data))
