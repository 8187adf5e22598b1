from django import forms

from rotation.models import PolicyVariant

RANGE_KEYS = ('scale', 'mass', 'friction', 'com', 'kp', 'kd')


def _check_ranges(form, name):
    ranges = form.cleaned_data.get(name)
    if ranges is None:
        return
    if not isinstance(ranges, dict):
        form.add_error(name, "Expected an object keyed by parameter name")
        return
    for key in RANGE_KEYS:
        bounds = ranges.get(key)
        if not isinstance(bounds, (list, tuple)) or len(bounds) != 2:
            form.add_error(name, f"{key}: expected [lo, hi]")
        elif not all(isinstance(b, (int, float)) for b in bounds):
            form.add_error(name, f"{key}: bounds must be numbers")
        elif bounds[0] > bounds[1]:
            form.add_error(name, f"{key}: range must be ordered")


class EnvConfigForm(forms.Form):
    num_envs = forms.IntegerField(min_value=1)
    episode_len = forms.IntegerField(min_value=2)
    history_len = forms.IntegerField(min_value=1)
    obs_pairs = forms.IntegerField(min_value=1)
    rotation_sign = forms.IntegerField()
    randomize = forms.BooleanField(required=False)
    train_ranges = forms.JSONField()
    test_ranges = forms.JSONField()
    train_disturbance_scale = forms.FloatField(min_value=0)
    test_disturbance_scale = forms.FloatField(min_value=0)
    disturbance_prob = forms.FloatField(min_value=0, max_value=1)
    ood_lobed_fraction = forms.FloatField(min_value=0, max_value=1)
    ood_lobe_eps_max = forms.FloatField(min_value=0, max_value=0.5)
    joint_noise = forms.FloatField(min_value=0)
    c_max_train = forms.FloatField(min_value=0)
    c_max_eval = forms.FloatField(min_value=0)
    drop_patience = forms.IntegerField(min_value=1)
    r_min = forms.FloatField()
    r_max = forms.FloatField()
    lambda_pose = forms.FloatField(min_value=0)
    lambda_torque = forms.FloatField(min_value=0)
    lambda_work = forms.FloatField(min_value=0)
    lambda_linvel = forms.FloatField(min_value=0)
    scale_bucket_step = forms.FloatField(min_value=0.001)
    grasps_per_bucket = forms.IntegerField(min_value=1)
    grasp_offset = forms.FloatField(min_value=0)
    grasp_settle_time = forms.FloatField(min_value=0)
    grasp_tip_bound = forms.FloatField(min_value=0)

    def clean(self):
        """Vérifie les contraintes entre champs de l'environnement.

        Returns:
            dict: Les données nettoyées.
        """
        cleaned = super().clean()
        episode_len = cleaned.get('episode_len')
        window = max(cleaned.get('history_len') or 0, cleaned.get('obs_pairs') or 0)
        if episode_len is not None and episode_len <= window:
            self.add_error('episode_len', f"Must exceed the history length ({window})")
        if cleaned.get('rotation_sign') not in (None, -1, 1):
            self.add_error('rotation_sign', "Must be -1 or 1")
        r_min, r_max = cleaned.get('r_min'), cleaned.get('r_max')
        if r_min is not None and r_max is not None and r_min >= r_max:
            self.add_error('r_min', "r_min must be lower than r_max")
        c_train, c_eval = cleaned.get('c_max_train'), cleaned.get('c_max_eval')
        if c_train is not None and c_eval is not None and c_eval < c_train:
            self.add_error('c_max_eval', "The evaluation drop threshold cannot be stricter than training")
        _check_ranges(self, 'train_ranges')
        _check_ranges(self, 'test_ranges')
        return cleaned


class TrainConfigForm(forms.Form):
    variant = forms.ChoiceField(choices=[(v.value, v.value) for v in PolicyVariant])
    horizon = forms.IntegerField(min_value=1)
    epochs = forms.IntegerField(min_value=1)
    minibatches = forms.IntegerField(min_value=1)
    lr = forms.FloatField(min_value=0)
    gamma = forms.FloatField(min_value=0, max_value=1)
    gae_lambda = forms.FloatField(min_value=0, max_value=1)
    clip_eps = forms.FloatField(min_value=0, max_value=1)
    entropy_coef = forms.FloatField(min_value=0)
    value_coef = forms.FloatField(min_value=0)
    max_grad_norm = forms.FloatField(min_value=0)
    max_updates = forms.IntegerField(min_value=1)
    checkpoint_every = forms.IntegerField(min_value=1)
    eval_every = forms.IntegerField(min_value=1)
    divergence_floor = forms.FloatField()
    divergence_patience = forms.IntegerField(min_value=1)
    init_log_std = forms.FloatField(min_value=-5, max_value=1)

    def clean(self):
        cleaned = super().clean()
        if cleaned.get('variant') != PolicyVariant.DR.value and self.data.get('obs_pairs', 3) != 3:
            self.add_error('variant', "Only the dr variant accepts obs_pairs other than 3")
        return cleaned


class AdaptConfigForm(forms.Form):
    history_len = forms.IntegerField(min_value=1)
    adapt_lr = forms.FloatField(min_value=0)
    adapt_iterations = forms.IntegerField(min_value=1)
    adapt_horizon = forms.IntegerField(min_value=1)
    adapt_epochs = forms.IntegerField(min_value=1)
    adapt_batch = forms.IntegerField(min_value=1)
    adapt_plateau_tol = forms.FloatField(min_value=0)
    adapt_plateau_patience = forms.IntegerField(min_value=1)
    adapt_holdout = forms.FloatField(min_value=0, max_value=0.5)


class EvalConfigForm(forms.Form):
    episodes = forms.IntegerField(min_value=1)
    seeds = forms.JSONField()
    swap_every = forms.IntegerField(min_value=0)
    periodic_retries = forms.IntegerField(min_value=1)

    def clean_seeds(self):
        seeds = self.cleaned_data['seeds']
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise forms.ValidationError("Expected a non-empty list of non-negative integers")
        if len(set(seeds)) != len(seeds):
            raise forms.ValidationError("Seeds must be distinct")
        return seeds


SECTION_FORMS = {
    'env': EnvConfigForm,
    'train': TrainConfigForm,
    'adapt': AdaptConfigForm,
    'eval': EvalConfigForm,
}
