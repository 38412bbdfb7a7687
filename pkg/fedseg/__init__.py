# fedseg: federated tumor segmentation simulator
