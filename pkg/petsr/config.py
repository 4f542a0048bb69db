import math
import os
from collections import namedtuple

# tissue labels of the synthetic phantoms
BACKGROUND, GRAY_MATTER, WHITE_MATTER, CSF, BLOOD_POOL = 0, 1, 2, 3, 4
tissue_labels = {'background': BACKGROUND, 'gray_matter': GRAY_MATTER, 'white_matter': WHITE_MATTER, 'csf': CSF, 'blood_pool': BLOOD_POOL}

# default tissue table: FDG-like activity and T1-like MR contrast (gray/white inverted)
default_pet_activity = {BACKGROUND: 0.0, GRAY_MATTER: 4.0, WHITE_MATTER: 1.0, CSF: 0.1, BLOOD_POOL: 2.0}
default_mr_intensity = {BACKGROUND: 0.0, GRAY_MATTER: 0.5, WHITE_MATTER: 0.9, CSF: 0.2, BLOOD_POOL: 0.4}
default_mr_noise_sigma = 0.02

# FWHM = 2 sqrt(2 ln 2) sigma for a Gaussian
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
GAUSSIAN_TRUNCATE = 4.0  # kernels are cut at +-4 sigma

# scanner stand-ins: coarse detector bins for the LR scanner, fine ones for the HR scanner
ScannerPreset = namedtuple('ScannerPreset', 'label n_angles bin_width_mm')
scanner_presets = {'LR-like': ScannerPreset('LR-like', 96, 4.0),
                   'HR-like': ScannerPreset('HR-like', 96, 1.5)}
fov_radius_mm = 140.0
osem_iterations = 6
osem_subsets = 16
counts_per_slice = 5e5
hr_post_filter_fwhm_mm = 2.4

# PSF of the LR scanner: FWHM grows linearly from the centre to the edge of the FOV
psf_inner_fwhm_mm = 4.3
psf_outer_fwhm_mm = 8.3
psf_axial_extent_mm = 155.0
psf_n_radial = 5
psf_n_axial = 3

# network variants: ordered input channels and depth
LR_PET, HR_MR, RADIAL, AXIAL = 'lr_pet', 'hr_mr', 'radial', 'axial'
network_inputs = {'S1': (LR_PET,), 'V1': (LR_PET,),
                  'S2': (LR_PET, HR_MR), 'V2': (LR_PET, HR_MR),
                  'S3': (LR_PET, RADIAL, AXIAL), 'V3': (LR_PET, RADIAL, AXIAL),
                  'S4': (LR_PET, HR_MR, RADIAL, AXIAL), 'V4': (LR_PET, HR_MR, RADIAL, AXIAL)}
network_depths = {'S': 3, 'V': 20}
n_filters = 64
kernel_size = 3

# training
learning_rate = 3e-4
batch_size = 10
epochs = 400
adam_betas = (0.9, 0.999)
adam_epsilon = 1e-8
patch_size = 64
patch_stride = 32
receptive_field_depth20 = 41

# classical baselines
je_bins = 64
je_parzen_sigma = 1.0
tv_epsilon_factor = 1e-6
deconv_max_iters = 50
deconv_tolerance = 1e-7
beta_candidates = {'TV': (1e-3, 1e-2, 1e-1), 'JE': (1e-2, 1e-1, 1.0)}

# study plumbing
classical_methods = ('LR', 'TV', 'JE')
cnn_methods = tuple(network_inputs)
all_methods = classical_methods + cnn_methods
study_references = {1: ('true',), 2: ('target', 'true'), 3: ('target',)}
output_folder = os.environ.get('PETSR_OUTPUT_PATH', 'petsr_output')
study_subfolders = ('volumes', 'checkpoints', 'png')
log_format = '%(asctime)s - %(message)s'
log_datefmt = '%d-%b-%y %H:%M:%S'

if __name__ == "__main__":
    for variant, inputs in network_inputs.items():
        print(variant, inputs)
