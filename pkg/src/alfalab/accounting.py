"""Train / Tuned / Test parameter columns for an architecture and adapter setup."""

from __future__ import annotations

from dataclasses import dataclass

from .adapters import alfa_layer_params, lora_layer_params
from .model import INVENTORIES, ModelInventory, layer_rank, truncated_size


@dataclass(frozen=True)
class ParamRow:
    method: str
    train: int
    tuned: int
    test: int


def alfa_tuned(inv: ModelInventory, d: int, r: int, H: int, layers: int | None = None) -> int:
    return sum(alfa_layer_params(H, r, layer_rank(s, d)) for s in inv.adapted_layers(layers))


def lora_tuned(inv: ModelInventory, r: int, layers: int | None = None) -> int:
    return sum(lora_layer_params(s.m, s.n, r) for s in inv.adapted_layers(layers))


def param_table(
    arch: str, d: int, r: int, H: int, layers: int | None = None
) -> list[ParamRow]:
    """Rows for the truncated baseline, LoRA and Alfa.

    Alfa merges into the factored weights, so its Test size equals the
    truncated baseline. LoRA cannot merge into factors: unmerged it ships its
    adapter, merged it ships dense weights; the unmerged size is reported.
    """
    inv = INVENTORIES[arch]()
    test = truncated_size(inv, d)
    lora = lora_tuned(inv, r, layers)
    alfa = alfa_tuned(inv, d, r, H, layers)
    return [
        ParamRow("full", inv.total_params, 0, inv.total_params),
        ParamRow("truncated", test, 0, test),
        ParamRow("lora", test + lora, lora, test + lora),
        ParamRow("alfa", test + alfa, alfa, test),
    ]


def millions(x: int) -> str:
    return f"{x / 1e6:.2f}"


def format_table(rows: list[ParamRow]) -> str:
    lines = ["method,train,tuned,test,train_M,tuned_M,test_M"]
    for r in rows:
        lines.append(
            f"{r.method},{r.train},{r.tuned},{r.test},"
            f"{millions(r.train)},{millions(r.tuned)},{millions(r.test)}"
        )
    return "\n".join(lines) + "\n"


def desk_accounting(cfg) -> dict[str, int]:
    inv = INVENTORIES["minigaze"]()
    convs = {s.name: s for s in inv.convs}
    adapted = [convs[c] for c in cfg.adapted_list]
    return {
        "minigaze_full": inv.total_params,
        "minigaze_truncated": truncated_size(inv, cfg.svd_rank),
        "alfa_tuned": sum(
            alfa_layer_params(cfg.heads, cfg.lora_rank, layer_rank(s, cfg.svd_rank)) for s in adapted
        ),
        "lora_tuned": sum(lora_layer_params(s.m, s.n, cfg.lora_rank) for s in adapted),
    }
