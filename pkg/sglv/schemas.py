from marshmallow import Schema, fields, post_load, validate

from sglv.core import Camera
from sglv.fit import FitOptions, LossWeights
from sglv.scenegen import AreaLight, Blocker, BoxScene, WallMaterial, WindowLight
from sglv.shading import SAMPLING_MODES, SphereRenderSpec


def vector(size=3, **kwargs):
    return fields.List(fields.Float(), validate=validate.Length(equal=size), **kwargs)


def color(**kwargs):
    return fields.List(
        fields.Float(validate=validate.Range(min=0.0)),
        validate=validate.Length(equal=3),
        **kwargs,
    )


class WallMaterialSchema(Schema):
    albedo = color(required=True)
    checker = color(allow_none=True, load_default=None)
    checker_size = fields.Float(load_default=0.25, validate=validate.Range(min=0.0, min_inclusive=False))

    @post_load
    def make(self, data, **kwargs):
        checker = data["checker"]
        return WallMaterial(
            tuple(data["albedo"]), tuple(checker) if checker else None, data["checker_size"]
        )


class AreaLightSchema(Schema):
    center = vector(required=True)
    size = fields.List(
        fields.Float(validate=validate.Range(min=0.0, min_inclusive=False)),
        required=True,
        validate=validate.Length(equal=2),
    )
    axis = fields.Int(required=True, validate=validate.OneOf([0, 1, 2]))
    facing = fields.Int(required=True, validate=validate.OneOf([-1, 1]))
    radiance = color(required=True)

    @post_load
    def make(self, data, **kwargs):
        return AreaLight(
            tuple(data["center"]),
            tuple(data["size"]),
            data["axis"],
            data["facing"],
            tuple(data["radiance"]),
        )


class WindowLightSchema(Schema):
    wall = fields.Int(required=True, validate=validate.Range(min=0, max=5))
    center = vector(required=True)
    size = fields.List(fields.Float(), required=True, validate=validate.Length(equal=2))
    sun_direction = vector(required=True)
    sun_radiance = color(required=True)
    sky_radiance = color(load_default=[0.6, 0.8, 1.2])
    angular_radius = fields.Float(
        load_default=0.05, validate=validate.Range(min=0.0, max=1.0, min_inclusive=False)
    )

    @post_load
    def make(self, data, **kwargs):
        return WindowLight(
            **{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        )


class BlockerSchema(Schema):
    lo = vector(required=True)
    hi = vector(required=True)
    albedo = color(load_default=[0.5, 0.5, 0.5])

    @post_load
    def make(self, data, **kwargs):
        return Blocker(tuple(data["lo"]), tuple(data["hi"]), tuple(data["albedo"]))


class SceneSchema(Schema):
    size = fields.List(
        fields.Float(validate=validate.Range(min=0.0, min_inclusive=False)),
        required=True,
        validate=validate.Length(equal=3),
    )
    walls = fields.List(
        fields.Nested(WallMaterialSchema), required=True, validate=validate.Length(equal=6)
    )
    lights = fields.List(fields.Nested(AreaLightSchema), load_default=list)
    window = fields.Nested(WindowLightSchema, allow_none=True, load_default=None)
    blockers = fields.List(fields.Nested(BlockerSchema), load_default=list)
    ambient = fields.Float(load_default=0.0, validate=validate.Range(min=0.0))

    @post_load
    def make(self, data, **kwargs):
        return BoxScene(
            size=tuple(data["size"]),
            walls=tuple(data["walls"]),
            lights=tuple(data["lights"]),
            window=data["window"],
            blockers=tuple(data["blockers"]),
            ambient=data["ambient"],
        )


scene_schema = SceneSchema()


class PoseSchema(Schema):
    """Camera-to-world 4x4 matrix, row-major, with pinhole intrinsics."""

    index = fields.Int(required=True, validate=validate.Range(min=0))
    matrix = vector(16, required=True)
    fx = fields.Float(required=True, validate=validate.Range(min=0.0, min_inclusive=False))
    fy = fields.Float(required=True, validate=validate.Range(min=0.0, min_inclusive=False))
    cx = fields.Float(required=True)
    cy = fields.Float(required=True)
    width = fields.Int(required=True, validate=validate.Range(min=2))
    height = fields.Int(required=True, validate=validate.Range(min=2))

    @post_load
    def make(self, data, **kwargs):
        index = data.pop("index")
        return index, Camera.from_matrix(**data)


class PosesSchema(Schema):
    frames = fields.List(fields.Nested(PoseSchema), required=True)


poses_schema = PosesSchema()


class ProbeSchema(Schema):
    index = fields.Int(required=True, validate=validate.Range(min=0))
    position = vector(required=True)
    file = fields.Str(required=True)


class ProbesSchema(Schema):
    height = fields.Int(required=True, validate=validate.Range(min=1))
    frame_axes = vector(9, required=True)
    probes = fields.List(fields.Nested(ProbeSchema), required=True)


probes_schema = ProbesSchema()


class RenderSettingsSchema(Schema):
    samples = fields.Int(required=True, validate=validate.Range(min=2))
    step = fields.Float(required=True, validate=validate.Range(min=0.0, min_inclusive=False))
    early_out = fields.Bool(load_default=True)
    use_lobe = fields.Bool(load_default=True)
    chunk = fields.Int(load_default=4096, validate=validate.Range(min=1))


render_settings_schema = RenderSettingsSchema()


class SphereSpecSchema(Schema):
    size = fields.Int(required=True, validate=validate.Range(min=1))
    spp = fields.Int(required=True, validate=validate.Range(min=1))
    mode = fields.Str(required=True, validate=validate.OneOf(SAMPLING_MODES))
    seed = fields.Int(load_default=0)
    specular_weight = fields.Float(load_default=0.5, validate=validate.Range(min=0.0, max=1.0))

    @post_load
    def make(self, data, **kwargs):
        return SphereRenderSpec(**data)


sphere_spec_schema = SphereSpecSchema()


class LossWeightsSchema(Schema):
    render = fields.Float(validate=validate.Range(min=0.0))
    smooth = fields.Float(validate=validate.Range(min=0.0))

    @post_load
    def make(self, data, **kwargs):
        return LossWeights(**data)


class FitOptionsSchema(Schema):
    iterations = fields.Int(required=True, validate=validate.Range(min=1))
    step_size = fields.Float(required=True, validate=validate.Range(min=0.0, min_inclusive=False))
    weights = fields.Nested(LossWeightsSchema, required=True)
    sphere_size = fields.Int(validate=validate.Range(min=1))
    spp = fields.Int(validate=validate.Range(min=1))
    max_samples = fields.Int(validate=validate.Range(min=2))
    seed = fields.Int()
    log_every = fields.Int(validate=validate.Range(min=1))

    @post_load
    def make(self, data, **kwargs):
        return FitOptions(**data)


fit_options_schema = FitOptionsSchema()


class SidecarSchema(Schema):
    command = fields.Str(required=True)
    seed = fields.Int(required=True)
    options = fields.Dict(keys=fields.Str(), required=True)
    inputs = fields.Dict(keys=fields.Str(), values=fields.Str(), load_default=dict)
    outputs = fields.List(fields.Str(), load_default=list)


sidecar_schema = SidecarSchema()


class RunManifestSchema(SidecarSchema):
    probe = vector(required=True)
    frames = fields.List(fields.Dict(keys=fields.Str()), load_default=list)


run_manifest_schema = RunManifestSchema()
