import time, json, numpy as np, torch, itertools
from fewpad import *
from fewpad.config import RunConfig, BackboneConfig, BankConfig, NetworkConfig
from fewpad.pieg import PiegConfig

spec = ToySpec(image_size=64, k_train=2, n_normal_test=20, n_anomalous_test=20)
results = []
for T, epochs in [(10, 100), (10, 200)]:
    for ablation in ["glcl", "none"]:
        for seed in [0, 1, 2]:
            train_s, test_s = make_toy_dataset(spec, seed=seed)
            cfg = RunConfig(
                seed=seed, epochs=epochs, working_resolution=128,
                backbone=BackboneConfig(arch="resnet18", weights="random", neighborhood=3, seed=0),
                bank=BankConfig(ratio=0.25, cap=128),
                network=NetworkConfig(disc_hidden=256, disc_depth=2),
                pieg=PiegConfig(steps=T, eta=0.01),
            ).with_ablation(ablation)
            t0 = time.time()
            res = train(train_s, cfg)
            t_train = time.time() - t0
            rep = evaluate(res.checkpoint, res.bank, test_s)
            m = rep.per_seed[0]
            row = dict(T=T, epochs=epochs, ablation=ablation, seed=seed,
                       img=m.image_auroc, px=m.pixel_auroc, pro=m.pro, dice=m.dice,
                       t_train=round(t_train,1))
            results.append(row)
            print(json.dumps(row), flush=True)
json.dump(results, open(".tuning/exp1.json","w"), indent=1)
