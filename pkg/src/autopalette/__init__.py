"""autopalette: color-condensed dataset distillation under a bit budget.

Subpackages/modules:
  nn        minimal reverse-mode autodiff engine plus the ConvNet backbone
  image_io  CIFAR-10 binary + PPM codecs and ZCA whitening
  quantize  Median Cut / OCTree baseline color quantizers
  palette   the palette network and its bucket-utilization losses
  selector  gradient-similarity submodular selection for initialization
  codec     bit-exact packed storage and the storage-budget calculator
  distill   distribution-matching distillation loop and evaluation
  repro     cached drivers for the desk-scale experiment suites
  cli       command-line front end
"""

__version__ = "0.1.0"
