"""What a client actually sends to the server.

Local class prototypes are averaged into global ones weighted by counts, then
each feature is pulled toward its class prototype and randomly masked before
upload. The wire encoding carries only the mixed rows, labels and client ids.
"""
import numpy as np

from fedpall.data import DriftSpec, generate_drifted_clients
from fedpall.neural import MlpSpec, forward_mlp, init_mlp, make_rng
from fedpall.prototypes import (MixConfig, aggregate_global_prototypes, compute_local_prototypes,
                                decode_record_arrays, encode_record_arrays, mix_features)

clients = generate_drifted_clients(DriftSpec(n_clients=3, n_classes=4, input_dim=8, samples_per_class=50))
extractor = init_mlp(MlpSpec((8, 16, 6)), make_rng(0))

local = []
for c in clients:
    z, _ = forward_mlp(extractor, c.train_features)
    local.append(compute_local_prototypes(z, c.train_labels, 4))
    print(f"client {c.client_id}: counts {local[-1].counts.tolist()}")

global_protos = aggregate_global_prototypes(local)
print("global counts", global_protos.counts.tolist())

c = clients[0]
z, _ = forward_mlp(extractor, c.train_features)
mixed = mix_features(z, c.train_labels, global_protos, MixConfig(u_f=0.5, u_r=1.0, beta=0.8), make_rng(0, 7))
blob = encode_record_arrays(mixed, c.train_labels, np.full(len(mixed), c.client_id))
feats, labels, ids = decode_record_arrays(blob)

print(f"upload: {len(feats)} records, {len(blob)} bytes")
print(f"zeroed entries: {np.mean(feats == 0):.3f} (mask keeps ~0.8)")
print(f"mean distance raw -> own prototype   {np.linalg.norm(z - global_protos.prototypes[c.train_labels], axis=1).mean():.3f}")
print(f"mean distance sent -> own prototype  {np.linalg.norm(feats - global_protos.prototypes[labels], axis=1).mean():.3f}")
