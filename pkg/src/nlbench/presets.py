"""Static dataset profiles: canonical class order, groupings and dependency groups.

Class orders follow the row order of the published transition matrices, so a
manifest whose labels use these orders reproduces those matrices exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from nlbench.dataman import GroupingMap, load_grouping


@dataclass(frozen=True)
class DatasetProfile:
    key: str
    display_name: str
    class_names: tuple[str, ...]
    # grouping files shipped per reduced class count
    groupings: dict[int, str] = field(default_factory=dict)
    # dependency groups for class-dependent noise, by class name
    dependency_groups: tuple[tuple[str, ...], ...] = ()
    train_size: int | None = None
    lnl_epochs: int = 50
    sharpen_temperature: float = 0.2

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def grouping(self, num_groups: int) -> GroupingMap:
        if num_groups == self.num_classes:
            return GroupingMap.identity(self.class_names)
        if num_groups not in self.groupings:
            raise KeyError(f"{self.key} has no {num_groups}-class grouping (available: {sorted(self.groupings)})")
        return load_grouping(grouping_path(self.groupings[num_groups]), self.class_names)

    def dependency_index_groups(self) -> list[list[int]]:
        index = {n: i for i, n in enumerate(self.class_names)}
        return [[index[n] for n in g] for g in self.dependency_groups]


def grouping_path(filename: str) -> Path:
    return Path(str(resources.files("nlbench") / "data" / "groupings" / filename))


_NCT = ("Adipose", "Smooth muscle", "Colon mucosa", "Background", "Debris", "Lymphocytes", "Mucus",
        "Cancer stroma", "Adenocarcinoma")
_MURA = ("XR_SHOULDER", "XR_HUMERUS", "XR_FOREARM", "XR_FINGER", "XR_WRIST", "XR_HAND", "XR_ELBOW")
_FETAL = ("Fetal abdomen", "Fetal brain", "Fetal femur", "Fetal thorax", "Maternal cervix", "Other")
_COVID = ("Covid", "Non-Covid", "Normal")
_DERMNET = ("Acne", "Atopic", "Cellulitis", "Eczema", "Poison Ivy", "Psoriasis", "Seborrheic",
            "Herpes HPV", "Scabies Lyme", "Tinea Ringworm", "Warts Molluscum",
            "Actinic", "Bullous", "Exanthems", "Hair Loss", "Light Diseases", "Lupus", "Melanoma",
            "Nail Fungus", "Systemic", "Urticaria Hives", "Vascular Tumors", "Vasculitis")

PROFILES: dict[str, DatasetProfile] = {
    "nct": DatasetProfile(
        "nct", "NCT-CRC-HE-100K", _NCT,
        groupings={3: "nct_3.csv", 6: "nct_6.csv", 7: "nct_7.csv"},
        dependency_groups=(_NCT[0:3], _NCT[3:7], _NCT[7:9]),
        train_size=100_000,
    ),
    "mura": DatasetProfile(
        "mura", "MURA", _MURA,
        groupings={3: "mura_3.csv", 6: "mura_6.csv"},
        dependency_groups=(("XR_SHOULDER", "XR_HUMERUS"), ("XR_FINGER", "XR_HAND"),
                           ("XR_WRIST", "XR_FOREARM", "XR_ELBOW")),
        train_size=36_808,
    ),
    "covid": DatasetProfile(
        "covid", "COVID-QU-Ex", _COVID,
        dependency_groups=(("Covid", "Non-Covid"),),
        train_size=27_132,
    ),
    "dermnet": DatasetProfile(
        "dermnet", "DermNet", _DERMNET,
        groupings={3: "dermnet_3.csv", 6: "dermnet_6.csv", 7: "dermnet_7.csv", 13: "dermnet_13.csv"},
        dependency_groups=(_DERMNET[0:7], _DERMNET[7:11], _DERMNET[11:23]),
        train_size=15_557,
        lnl_epochs=100,
        sharpen_temperature=0.5,
    ),
    "fetal": DatasetProfile(
        "fetal", "Maternal-fetal US", _FETAL,
        groupings={3: "fetal_3.csv"},
        dependency_groups=(_FETAL[0:4],),
        train_size=7_129,
    ),
}

# pretraining epochs per (task, dataset)
SSL_EPOCHS: dict[str, dict[str, int]] = {
    "rotation": dict(nct=150, covid=150, mura=150, dermnet=150, fetal=150),
    "jigsaw": dict(nct=300, covid=300, mura=300, dermnet=300, fetal=300),
    "jigmag": dict(nct=300, covid=300, mura=300, dermnet=300, fetal=300),
    "simclr": dict(nct=400, covid=600, mura=600, dermnet=600, fetal=800),
    "barlow": dict(nct=300, covid=600, mura=600, dermnet=600, fetal=800),
    "moco": dict(nct=500, covid=500, mura=600, dermnet=600, fetal=700),
    "vae": dict(nct=200, covid=100, mura=49, dermnet=400, fetal=400),
}

# reference values for the adversarial encoder pretraining that is not implemented here;
# its checkpoints can still be imported through backbone.import_external_state
BIGBIGAN_REFERENCE = dict(latent_dim=114, output_size=128, adam_betas=(0.5, 0.999),
                          discriminator_steps_per_generator_step=2, batch_size=32, lr=2e-5,
                          epochs=dict(nct=30, covid=250, mura=100, dermnet=200, fetal=350))


def profile(key: str) -> DatasetProfile:
    try:
        return PROFILES[key]
    except KeyError:
        raise KeyError(f"unknown dataset profile {key!r}; known: {sorted(PROFILES)}") from None
