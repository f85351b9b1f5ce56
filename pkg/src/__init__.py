# XAIGuard - Explanation-aware backdoor attacks and the CFN defense on a numpy autodiff core
