"""Deformable point-splat motion fitting with shared rigid motion bases.

Modules: ``geom`` (poses, quaternion blending), ``scene`` (splat model and
deformation), ``losses``, ``visibility`` (depth compositing, occlusion
scores), ``optim`` (seeding and training), ``restage`` (rewound joint
training, backtracing), ``metrics``, ``synth`` (scripted scenes), ``io``,
``config`` and ``cli``.
"""

__version__ = "0.1.0"
