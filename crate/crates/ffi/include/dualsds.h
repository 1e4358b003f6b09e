#ifndef DUALSDS_H
#define DUALSDS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_ARGUMENT = 1,
  /**
   * Unreadable or invalid config, scene, checkpoint or argument.
   */
  DS_STATUS_INVALID_INPUT = 2,
  DS_STATUS_RUNTIME = 3,
  DS_STATUS_EMPTY_MESH = 4,
  DS_STATUS_BUFFER_TOO_SMALL = 5,
  DS_STATUS_PANIC = 6,
} DsStatus;

/**
 * An optimizable radiance field.
 */
typedef struct DsField DsField;

/**
 * A ground-truth scene.
 */
typedef struct DsScene DsScene;

/**
 * Camera on the orbit at the given angles (degrees) looking at the origin.
 */
typedef struct DsOrbit {
  double azimuth_deg;
  double elevation_deg;
  double distance;
  double fov_deg;
  uint32_t width;
  uint32_t height;
  uint32_t samples;
} DsOrbit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *ds_last_error_message(void);

/**
 * Loads a scene file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_scene_load(const char *path, struct DsScene **out);

/**
 * One of the built-in scenes: `sphere`, `two_box` or `shell`.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_scene_builtin(const char *name, struct DsScene **out);

/**
 * # Safety
 * `scene` must come from this library and not be used afterwards. NULL is ignored.
 */
void ds_scene_free(struct DsScene *scene);

/**
 * Loads a field checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_field_load(const char *path, struct DsField **out);

/**
 * # Safety
 * `field` must be a live handle and `path` a NUL-terminated string.
 */
enum DsStatus ds_field_save(const struct DsField *field, const char *path);

/**
 * # Safety
 * `field` must come from this library and not be used afterwards. NULL is ignored.
 */
void ds_field_free(struct DsField *field);

/**
 * Density and color at `point` seen along `direction` (normalized here).
 *
 * # Safety
 * `point`, `direction` and `rgb` must each point to three doubles and
 * `sigma` to one.
 */
enum DsStatus ds_field_query(const struct DsField *field,
                             const double *point,
                             const double *direction,
                             double *sigma,
                             double *rgb);

/**
 * Renders a field into `out` (`len` doubles).
 *
 * # Safety
 * `field` must be a live handle; `out` must hold `len` doubles.
 */
enum DsStatus ds_field_render(const struct DsField *field,
                              struct DsOrbit orbit,
                              double *out,
                              size_t len);

/**
 * Renders a scene's ground truth into `out` (`len` doubles).
 *
 * # Safety
 * `scene` must be a live handle; `out` must hold `len` doubles.
 */
enum DsStatus ds_scene_render(const struct DsScene *scene,
                              struct DsOrbit orbit,
                              double *out,
                              size_t len);

/**
 * Distills a field from `scene` with the ground-truth oracles. `config`
 * is a run config path, or NULL for the smoke profile. `seed` replaces the
 * config's seed.
 *
 * # Safety
 * `scene` must be a live handle, `config` NULL or a NUL-terminated string,
 * `out` a valid pointer.
 */
enum DsStatus ds_distill(const struct DsScene *scene,
                         const char *config,
                         uint64_t seed,
                         struct DsField **out);

/**
 * Extracts, normalizes and writes the field's mesh as OBJ to `path`, with
 * its front view as PNG next to it. Returns `DS_STATUS_EMPTY_MESH` when no
 * density crosses `threshold`.
 *
 * # Safety
 * `field` must be a live handle and `path` a NUL-terminated string.
 */
enum DsStatus ds_field_mesh_obj(const struct DsField *field,
                                uint32_t resolution,
                                double threshold,
                                const char *path);

/**
 * Field of view in degrees of the fixed front-view camera.
 */
double ds_front_view_fov_deg(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALSDS_H */
