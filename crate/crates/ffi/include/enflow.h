#ifndef ENFLOW_H
#define ENFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum EnflowStatus {
  ENFLOW_STATUS_OK = 0,
  ENFLOW_STATUS_NULL_POINTER = 1,
  ENFLOW_STATUS_INVALID_ARGUMENT = 2,
  ENFLOW_STATUS_MISSING_INPUT = 3,
  ENFLOW_STATUS_IO = 4,
  ENFLOW_STATUS_PARSE = 5,
  ENFLOW_STATUS_MODEL = 6,
  ENFLOW_STATUS_CONFIG = 7,
  ENFLOW_STATUS_PANIC = 8,
} EnflowStatus;

/**
 * Ground-state selection strategy.
 */
typedef enum EnflowCertMode {
  ENFLOW_CERT_MODE_JUST_FM = 0,
  ENFLOW_CERT_MODE_ENSEMBLE_CERT = 1,
} EnflowCertMode;

/**
 * Trained vector-field and energy networks.
 */
typedef struct EnflowModel EnflowModel;

/**
 * Bond graph with its harmonic prior.
 */
typedef struct EnflowMolecule EnflowMolecule;

/**
 * Sampler settings; `guided` is treated as a boolean.
 */
typedef struct EnflowSamplerOptions {
  uint32_t n_steps;
  double amplitude;
  int32_t guided;
  uint64_t seed;
} EnflowSamplerOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *enflow_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *enflow_version(void);

/**
 * Loads a checkpoint written by `enflow train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum EnflowStatus enflow_model_load(const char *path, struct EnflowModel **out);

/**
 * # Safety
 * `model` must come from [`enflow_model_load`] and not be used afterwards.
 */
void enflow_model_free(struct EnflowModel *model);

/**
 * Builds a molecule from atom types and `n_bonds` index pairs stored as
 * `bonds[2k], bonds[2k + 1]`.
 *
 * # Safety
 * `atom_types` must hold `n_atoms` values, `bonds` `2 * n_bonds` values, and
 * `out` must be writable.
 */
enum EnflowStatus enflow_molecule_new(const uint32_t *atom_types,
                                      size_t n_atoms,
                                      const uint32_t *bonds,
                                      size_t n_bonds,
                                      struct EnflowMolecule **out);

/**
 * # Safety
 * `mol` must come from [`enflow_molecule_new`] and not be used afterwards.
 */
void enflow_molecule_free(struct EnflowMolecule *mol);

/**
 * Number of atoms, or 0 for a null handle.
 *
 * # Safety
 * `mol` must be null or a live handle.
 */
size_t enflow_molecule_n_atoms(const struct EnflowMolecule *mol);

/**
 * Draws one centred harmonic-prior sample into `out` (`3 * n_atoms` doubles).
 *
 * # Safety
 * `mol` must be a live handle and `out` must hold `out_len` doubles.
 */
enum EnflowStatus enflow_prior_sample(const struct EnflowMolecule *mol,
                                      uint64_t seed,
                                      double *out,
                                      size_t out_len);

/**
 * Integrates the (optionally guided) flow from a prior draw with `opts.seed`.
 *
 * # Safety
 * Handles must be live, `opts` readable and `out` must hold `out_len` doubles.
 */
enum EnflowStatus enflow_sample(const struct EnflowModel *model,
                                const struct EnflowMolecule *mol,
                                const struct EnflowSamplerOptions *opts,
                                double *out,
                                size_t out_len);

/**
 * Learned energy of `coords`; the coordinate gradient is written to `grad`
 * unless it is null.
 *
 * # Safety
 * Handles must be live; `coords` and a non-null `grad` must hold `len`
 * doubles; `energy` must be writable.
 */
enum EnflowStatus enflow_energy(const struct EnflowModel *model,
                                const struct EnflowMolecule *mol,
                                const double *coords,
                                size_t len,
                                double *energy,
                                double *grad);

/**
 * Predicts a ground-state conformation. `ensemble_size` is ignored for JustFM.
 * The chosen candidate's index goes to `index` when it is not null.
 *
 * # Safety
 * Handles must be live, `opts` readable and `out` must hold `out_len` doubles.
 */
enum EnflowStatus enflow_certify(const struct EnflowModel *model,
                                 const struct EnflowMolecule *mol,
                                 enum EnflowCertMode mode,
                                 uint32_t ensemble_size,
                                 const struct EnflowSamplerOptions *opts,
                                 double *out,
                                 size_t out_len,
                                 uint32_t *index);

/**
 * RMSD of two conformations after optimal superposition.
 *
 * # Safety
 * `a` and `b` must hold `3 * n_atoms` doubles and `out` must be writable.
 */
enum EnflowStatus enflow_kabsch_rmsd(const double *a, const double *b, size_t n_atoms, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENFLOW_H */
