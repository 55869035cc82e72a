"""Deterministic synthetic Spanish-like clinical notes with gold PHI spans.

Linguistic realism is not the goal; span-structure fidelity is. Every
document has a clinical body; with augmentation enabled it also gets a
header and footer dense with PHI (mimicking how the shared-task corpus
was extended), and a region mask marks the body as the "real" text.
Same seed, same corpus, byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import DataError
from .evaluation import RegionMask, save_regions
from .ingest import AnnotatedDocument, PhiSpan, write_split

DEFAULT_CLASSES = (
    "NOMBRE_SUJETO_ASISTENCIA",
    "NOMBRE_PERSONAL_SANITARIO",
    "FECHAS",
    "EDAD_SUJETO_ASISTENCIA",
    "SEXO_SUJETO_ASISTENCIA",
    "CALLE",
    "TERRITORIO",
    "PAIS",
    "HOSPITAL",
    "INSTITUCION",
    "ID_SUJETO_ASISTENCIA",
    "NUMERO_TELEFONO",
    "CORREO_ELECTRONICO",
)

_MONTHS = (
    "enero", "febrero", "marzo", "abril", "mayo", "junio",
    "julio", "agosto", "septiembre", "octubre", "noviembre", "diciembre",
)
_SEXES = ("varón", "mujer", "hombre", "femenino", "masculino")
_FAMILY = ("madre", "padre", "hermano", "hermana", "esposa", "esposo", "hija", "hijo")
_DOMAINS = ("example.es", "correo.es", "salud.org", "clinica.net")

_FILLER_SENTENCES = (
    "El paciente acude a consulta por fiebre y tos de tres días de evolución.",
    "Se pauta tratamiento antibiótico y control en una semana.",
    "La exploración física no muestra hallazgos relevantes.",
    "Refiere dolor abdominal difuso sin signos de alarma.",
    "Analítica dentro de los límites de la normalidad.",
    "Se solicita radiografía de tórax y hemograma completo.",
    "Evolución favorable, afebril en las últimas cuarenta y ocho horas.",
    "No presenta alergias medicamentosas conocidas.",
    "Continúa con la medicación habitual sin cambios.",
    "Se recomienda reposo relativo e hidratación abundante.",
    "Acude acompañado para revisión de resultados.",
    "Auscultación pulmonar con murmullo vesicular conservado.",
)


def _lexicon(name: str) -> tuple[str, ...]:
    path = resources.files("deidseq.data.lexicons").joinpath(f"{name}.txt")
    return tuple(line for line in path.read_text(encoding="utf-8").splitlines() if line)


class _Lexicons:
    def __init__(self):
        self.nombres = _lexicon("nombres")
        self.apellidos = _lexicon("apellidos")
        self.ciudades = _lexicon("ciudades")
        self.paises = _lexicon("paises")
        self.calles = _lexicon("calles")
        self.hospitales = _lexicon("hospitales")
        self.instituciones = _lexicon("instituciones")
        self.profesiones = _lexicon("profesiones")


def _pick(rng: np.random.Generator, items) -> str:
    return items[int(rng.integers(len(items)))]


class _Surfaces:
    """Per-class surface form samplers; all draws flow from one generator."""

    def __init__(self, rng: np.random.Generator, lex: _Lexicons):
        self.rng = rng
        self.lex = lex

    def person(self) -> str:
        parts = [_pick(self.rng, self.lex.nombres), _pick(self.rng, self.lex.apellidos)]
        if self.rng.random() < 0.5:
            parts.append(_pick(self.rng, self.lex.apellidos))
        return " ".join(parts)

    def date(self) -> str:
        rng = self.rng
        d, m, y = int(rng.integers(1, 29)), int(rng.integers(1, 13)), int(rng.integers(1950, 2025))
        style = int(rng.integers(3))
        if style == 0:
            return f"{d:02d}/{m:02d}/{y}"
        if style == 1:
            return f"{d} de {_MONTHS[m - 1]} de {y}"
        return f"{y}-{m:02d}-{d:02d}"

    def age(self) -> str:
        if self.rng.random() < 0.85:
            return f"{int(self.rng.integers(1, 100))} años"
        return f"{int(self.rng.integers(1, 24))} meses"

    def street(self) -> str:
        kind = _pick(self.rng, ("Calle", "Avenida", "Plaza"))
        return f"{kind} {_pick(self.rng, self.lex.calles)}, {int(self.rng.integers(1, 121))}"

    def territory(self) -> str:
        city = _pick(self.rng, self.lex.ciudades)
        if self.rng.random() < 0.3:
            return f"{int(self.rng.integers(1, 53)):02d}{int(self.rng.integers(0, 1000)):03d} {city}"
        return city

    def subject_id(self) -> str:
        if self.rng.random() < 0.5:
            return f"{int(self.rng.integers(10**7, 10**8))}{_pick(self.rng, 'TRWAGMYFPDXBNJZSQVHLCKE')}"
        return str(int(self.rng.integers(10**6, 10**9)))

    def phone(self) -> str:
        rng = self.rng
        if rng.random() < 0.5:
            return f"+34 {int(rng.integers(600, 750))} {int(rng.integers(0, 1000)):03d} {int(rng.integers(0, 1000)):03d}"
        return f"9{int(rng.integers(10**7, 10**8))}"

    def email(self) -> str:
        first = _pick(self.rng, self.lex.nombres).lower()
        last = _pick(self.rng, self.lex.apellidos).lower()
        return f"{first}.{last}@{_pick(self.rng, _DOMAINS)}"

    def url(self) -> str:
        host = _pick(self.rng, ("hospital", "clinica", "sanidad", "salud"))
        tld = _pick(self.rng, ("es", "org", "net"))
        if self.rng.random() < 0.5:
            return f"http://www.{host}.{tld}/informes"
        return f"www.{host}.{tld}"

    def inet_address(self) -> str:
        rng = self.rng
        style = int(rng.integers(3))
        if style == 0:
            return ".".join(str(int(rng.integers(1, 255))) for _ in range(4))
        if style == 1:
            return "2001:db8:" + ":".join(f"{int(rng.integers(0, 0x10000)):x}" for _ in range(3)) + "::1"
        return ":".join(f"{int(rng.integers(0, 256)):02x}" for _ in range(6))

    def sample(self, phi_class: str) -> str:
        rng, lex = self.rng, self.lex
        table = {
            "NOMBRE_SUJETO_ASISTENCIA": self.person,
            "NOMBRE_PERSONAL_SANITARIO": self.person,
            "FAMILIARES_SUJETO_ASISTENCIA": lambda: _pick(rng, _FAMILY),
            "FECHAS": self.date,
            "EDAD_SUJETO_ASISTENCIA": self.age,
            "SEXO_SUJETO_ASISTENCIA": lambda: _pick(rng, _SEXES),
            "CALLE": self.street,
            "TERRITORIO": self.territory,
            "PAIS": lambda: _pick(rng, lex.paises),
            "HOSPITAL": lambda: _pick(rng, lex.hospitales),
            "CENTRO_SALUD": lambda: f"Centro de Salud {_pick(rng, lex.ciudades)}",
            "INSTITUCION": lambda: _pick(rng, lex.instituciones),
            "PROFESION": lambda: _pick(rng, lex.profesiones),
            "ID_SUJETO_ASISTENCIA": self.subject_id,
            "ID_ASEGURAMIENTO": self.subject_id,
            "ID_TITULACION_PERSONAL_SANITARIO": self.subject_id,
            "NUMERO_TELEFONO": self.phone,
            "NUMERO_FAX": self.phone,
            "CORREO_ELECTRONICO": self.email,
            "URL_WEB": self.url,
            "DIREC_PROT_INTERNET": self.inet_address,
        }
        if phi_class not in table:
            raise DataError(f"no surface sampler for PHI class {phi_class!r}")
        return table[phi_class]()


SUPPORTED_CLASSES = (
    "NOMBRE_SUJETO_ASISTENCIA", "NOMBRE_PERSONAL_SANITARIO", "FAMILIARES_SUJETO_ASISTENCIA",
    "FECHAS", "EDAD_SUJETO_ASISTENCIA", "SEXO_SUJETO_ASISTENCIA", "CALLE", "TERRITORIO",
    "PAIS", "HOSPITAL", "CENTRO_SALUD", "INSTITUCION", "PROFESION", "ID_SUJETO_ASISTENCIA",
    "ID_ASEGURAMIENTO", "ID_TITULACION_PERSONAL_SANITARIO", "NUMERO_TELEFONO", "NUMERO_FAX",
    "CORREO_ELECTRONICO", "URL_WEB", "DIREC_PROT_INTERNET",
)

# Carrier lines: "{}" marks the PHI slot; glue never abuts a slot with a
# word character, so gold boundaries always fall on token boundaries.
_HEADER_TEMPLATES = {
    "NOMBRE_SUJETO_ASISTENCIA": ("Nombre: {}.", "Paciente: {}."),
    "NOMBRE_PERSONAL_SANITARIO": ("Médico: {}.", "Facultativo responsable: {}."),
    "FAMILIARES_SUJETO_ASISTENCIA": ("Persona de contacto: {}.",),
    "FECHAS": ("Fecha de nacimiento: {}.", "Fecha de ingreso: {}.", "Fecha del informe: {}."),
    "EDAD_SUJETO_ASISTENCIA": ("Edad: {}.",),
    "SEXO_SUJETO_ASISTENCIA": ("Sexo: {}.",),
    "CALLE": ("Domicilio: {}.", "Dirección: {}."),
    "TERRITORIO": ("Ciudad: {}.", "Localidad: {}."),
    "PAIS": ("País: {}.", "País de origen: {}."),
    "HOSPITAL": ("Centro: {}.", "Hospital: {}."),
    "CENTRO_SALUD": ("Centro de atención: {}.",),
    "INSTITUCION": ("Institución: {}.", "Remitido a: {}."),
    "PROFESION": ("Profesión: {}.",),
    "ID_SUJETO_ASISTENCIA": ("NHC: {}.", "DNI: {}.", "NASS: {}."),
    "ID_ASEGURAMIENTO": ("Número de aseguramiento: {}.",),
    "ID_TITULACION_PERSONAL_SANITARIO": ("Número de colegiado: {}.",),
    "NUMERO_TELEFONO": ("Teléfono: {}.", "Teléfono de contacto: {}."),
    "NUMERO_FAX": ("Fax: {}.",),
    "CORREO_ELECTRONICO": ("Correo electrónico: {}.", "Email: {}."),
    "URL_WEB": ("Portal del paciente: {}.",),
    "DIREC_PROT_INTERNET": ("Dirección de acceso: {}.",),
}

_BODY_TEMPLATES = {
    "NOMBRE_SUJETO_ASISTENCIA": ("Se trata de {}, que acude por revisión.",),
    "NOMBRE_PERSONAL_SANITARIO": ("Valorado en consulta por {}.", "Seguimiento a cargo de {}."),
    "FAMILIARES_SUJETO_ASISTENCIA": ("Acude acompañado por su {}.",),
    "FECHAS": ("Ingresó el {} con dolor abdominal.", "Última revisión el {}.", "Intervenido el {}."),
    "EDAD_SUJETO_ASISTENCIA": ("Paciente de {} de edad.",),
    "SEXO_SUJETO_ASISTENCIA": ("Paciente de sexo {}.",),
    "CALLE": ("Reside en {}.",),
    "TERRITORIO": ("Natural de {}.", "Trasladado desde {}."),
    "PAIS": ("Procedente de {}.",),
    "HOSPITAL": ("Derivado al {}.", "Ingresado en el {}."),
    "CENTRO_SALUD": ("Seguimiento en el {}.",),
    "INSTITUCION": ("Informe solicitado por la {}.",),
    "PROFESION": ("Trabaja como {}.",),
    "ID_SUJETO_ASISTENCIA": ("Historia clínica número {}.",),
    "ID_ASEGURAMIENTO": ("Póliza número {}.",),
    "ID_TITULACION_PERSONAL_SANITARIO": ("Colegiado número {}.",),
    "NUMERO_TELEFONO": ("Avisar al {}.",),
    "NUMERO_FAX": ("Enviar resultados al fax {}.",),
    "CORREO_ELECTRONICO": ("Resultados remitidos a {}.",),
    "URL_WEB": ("Cita previa en {}.",),
    "DIREC_PROT_INTERNET": ("Acceso registrado desde {}.",),
}


@dataclass
class GeneratorConfig:
    seed: int = 13
    documents: int = 200
    classes: tuple[str, ...] = DEFAULT_CLASSES
    class_proportions: dict[str, float] | None = None  # None = uniform
    augmentation: bool = True
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)

    def validate(self) -> None:
        if self.documents < 1:
            raise DataError("document count must be positive")
        if not self.classes:
            raise DataError("PHI class subset must be non-empty")
        unknown = [c for c in self.classes if c not in SUPPORTED_CLASSES]
        if unknown:
            raise DataError(f"unsupported PHI classes: {unknown}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {self.split}")


@dataclass
class GeneratedCorpus:
    train: list[AnnotatedDocument]
    dev: list[AnnotatedDocument]
    test: list[AnnotatedDocument]
    regions: RegionMask
    stats: dict = field(default_factory=dict)

    @property
    def all_documents(self) -> list[AnnotatedDocument]:
        return [*self.train, *self.dev, *self.test]


class _DocBuilder:
    def __init__(self):
        self.parts: list[str] = []
        self.length = 0
        self.spans: list[PhiSpan] = []

    def add(self, s: str) -> None:
        if s:
            self.parts.append(s)
            self.length += len(s)

    def add_phi(self, surface: str, phi_class: str) -> None:
        self.spans.append(PhiSpan(self.length, self.length + len(surface), phi_class, surface))
        self.add(surface)

    def add_line(self, template: str, surface: str | None = None, phi_class: str | None = None) -> None:
        if surface is None:
            self.add(template + "\n")
            return
        before, after = template.split("{}")
        self.add(before)
        self.add_phi(surface, phi_class)
        self.add(after + "\n")

    def text(self) -> str:
        return "".join(self.parts)


def _phi_line(builder, rng, surfaces, templates, phi_class) -> None:
    template = _pick(rng, templates[phi_class])
    builder.add_line(template, surfaces.sample(phi_class), phi_class)


def generate(config: GeneratorConfig) -> GeneratedCorpus:
    """Produce train/dev/test documents plus body-region masks."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    surfaces = _Surfaces(rng, _Lexicons())
    classes = list(config.classes)
    if config.class_proportions is None:
        probs = np.full(len(classes), 1.0 / len(classes))
    else:
        probs = np.array([config.class_proportions.get(c, 0.0) for c in classes])
        if probs.sum() <= 0:
            raise DataError("class proportions must have positive mass on the configured classes")
        probs = probs / probs.sum()

    def draw_class() -> str:
        return classes[int(rng.choice(len(classes), p=probs))]

    docs: list[AnnotatedDocument] = []
    regions: RegionMask = {}
    header_phi = body_phi = 0
    for n in range(config.documents):
        doc_id = f"doc-{n:04d}"
        b = _DocBuilder()
        if config.augmentation:
            b.add_line("Datos del paciente.")
            for _ in range(int(rng.integers(5, 8))):
                _phi_line(b, rng, surfaces, _HEADER_TEMPLATES, draw_class())
                header_phi += 1
            b.add("\n")
        body_start = b.length
        n_filler = int(rng.integers(4, 9))
        n_phi = int(rng.integers(1, 4)) if config.augmentation else int(rng.integers(2, 6))
        slots = [True] * n_phi + [False] * n_filler
        rng.shuffle(slots)
        for is_phi in slots:
            if is_phi:
                _phi_line(b, rng, surfaces, _BODY_TEMPLATES, draw_class())
                body_phi += 1
            else:
                b.add(_pick(rng, _FILLER_SENTENCES) + "\n")
        body_end = b.length
        if config.augmentation:
            b.add("\n")
            b.add_line("Remitido por:")
            for _ in range(int(rng.integers(5, 8))):
                _phi_line(b, rng, surfaces, _HEADER_TEMPLATES, draw_class())
                header_phi += 1
        docs.append(AnnotatedDocument(doc_id=doc_id, text=b.text(), spans=sorted(b.spans)))
        regions[doc_id] = [(body_start, body_end)]

    order = rng.permutation(config.documents)
    n_train = int(config.documents * config.split[0])
    n_dev = int(config.documents * config.split[1])
    pick = lambda idxs: sorted((docs[i] for i in idxs), key=lambda d: d.doc_id)
    total_phi = header_phi + body_phi
    return GeneratedCorpus(
        train=pick(order[:n_train]),
        dev=pick(order[n_train : n_train + n_dev]),
        test=pick(order[n_train + n_dev :]),
        regions=regions,
        stats={
            "documents": config.documents,
            "phi_spans": total_phi,
            "header_footer_phi": header_phi,
            "body_phi": body_phi,
            "header_footer_fraction": header_phi / total_phi if total_phi else 0.0,
        },
    )


def write_corpus(corpus: GeneratedCorpus, out_dir: str | Path, classes=None) -> None:
    """Materialize the corpus directory layout plus the regions sidecar."""
    out = Path(out_dir)
    for split in ("train", "dev", "test"):
        write_split(out / split, getattr(corpus, split), classes)
    save_regions(out / "regions.tsv", corpus.regions)
